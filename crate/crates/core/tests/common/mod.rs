#![allow(dead_code)]

pub mod pending;
pub mod scenario;

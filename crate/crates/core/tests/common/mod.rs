#![allow(dead_code)]

pub mod benefit;
pub mod grads;
pub mod oracles;

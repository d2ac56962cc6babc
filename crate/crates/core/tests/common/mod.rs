#![allow(dead_code)]

pub mod checks;
pub mod dd;
pub mod oracles;

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod refcache;
pub mod scenarios;

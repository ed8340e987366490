#![allow(dead_code)]

use hiergen_train::config::Config;
use hiergen_train::data::Corpus;

pub fn tiny_config() -> Config {
    let c = Config::toy();
    c.validate().unwrap();
    c
}

pub fn corpus(c: &Config) -> Corpus {
    Corpus::shapeworld(&c.data).unwrap()
}

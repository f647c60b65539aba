pub mod bench;
pub mod dataset;
pub mod dbn;
pub mod driver;
pub mod error;
pub mod io;
pub mod numerics;
pub mod sparse_coding;
pub mod strategies;
pub mod uncertainty;
pub mod widl;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/dbn.md")]
    mod dbn {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/sparse_coding.md")]
    mod sparse_coding {}
    #[doc = include_str!("../../../book/src/widl.md")]
    mod widl {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/driver.md")]
    mod driver {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

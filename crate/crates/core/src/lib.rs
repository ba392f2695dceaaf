//! Tri-stream transformer blocks with a cacheable static mask pathway.

pub mod autodiff;
pub mod attention;
pub mod block;
pub mod cache;
pub mod cost;
pub mod denoise;
pub mod error;
pub mod linalg;
pub mod tokens;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/streams.md")]
    mod streams {}
    #[doc = include_str!("../../../book/src/layouts.md")]
    mod layouts {}
    #[doc = include_str!("../../../book/src/cache.md")]
    mod cache {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/denoise.md")]
    mod denoise {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

// mdbook cannot link snippets against workspace crates, so every chapter is
// pulled in here and `cargo test` runs its code blocks as doctests.

#[cfg(doctest)]
#[doc = include_str!("src/haze.md")]
mod haze {}
#[cfg(doctest)]
#[doc = include_str!("src/network.md")]
mod network {}
#[cfg(doctest)]
#[doc = include_str!("src/losses.md")]
mod losses {}
#[cfg(doctest)]
#[doc = include_str!("src/training.md")]
mod training {}
#[cfg(doctest)]
#[doc = include_str!("src/metrics.md")]
mod metrics {}
#[cfg(doctest)]
#[doc = include_str!("src/cli.md")]
mod cli {}

//! Experiment harness: relay benchmark, crawler, churn and tunnel demos.

pub mod crawl;
pub mod churn;
pub mod dataset;
pub mod relay_bench;
pub mod world;

pub use crawl::{crawl, crawl_all, node_congruence, CrawlError, CrawlReport, Inconsistency};

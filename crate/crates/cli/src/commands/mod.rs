pub mod analysis;
pub mod pipeline;
pub mod serve;
pub mod simulate;

use clap::ValueEnum;
use prefqrels_core::corpus::RunFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Auto,
    Trec,
    Marco,
}

impl FormatArg {
    pub fn resolve(self) -> Option<RunFormat> {
        match self {
            FormatArg::Auto => None,
            FormatArg::Trec => Some(RunFormat::Trec),
            FormatArg::Marco => Some(RunFormat::Marco),
        }
    }
}

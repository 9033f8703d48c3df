use std::fs;

use anyhow::{Context, Result};
use sst_core::store::{ReportOptions, StorageReport};

use super::compress::print_report;
use super::read_model;
use crate::config::{parse_layout, Policy};
use crate::output::Printer;
use crate::ReportArgs;

pub fn report(a: &ReportArgs, out: Printer) -> Result<()> {
    let options = ReportOptions {
        include_table: !a.no_table,
        include_bias: !a.no_bias,
        include_normalizers: !a.no_normalizers,
    };
    let report = match (&a.model, &a.layout) {
        (Some(path), _) => StorageReport::for_model(&read_model(path)?, options)?,
        (None, Some(path)) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut layout =
                parse_layout(&text).with_context(|| format!("layout {}", path.display()))?;
            if let Some(p) = &a.policy {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let policy =
                    Policy::parse(&text).with_context(|| format!("policy {}", p.display()))?;
                for l in &mut layout {
                    l.format = policy.resolve(&l.name)?.layer_format();
                    l.format
                        .check_shape(l.rows, l.cols)
                        .with_context(|| format!("layer {}", l.name))?;
                }
            }
            StorageReport::from_layouts(&layout, options)?
        }
        (None, None) => unreachable!("clap requires --model or --layout"),
    };
    print_report(&report, out);
    Ok(())
}

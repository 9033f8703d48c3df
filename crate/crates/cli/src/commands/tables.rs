use anyhow::Result;
use serde_json::json;
use sst_core::code_table::{
    address_bits, bits_to_kb, count_entries, reference_codes, table_storage_bits,
};
use sst_core::Error;

use crate::output::Printer;
use crate::TablesArgs;

pub fn tables(a: &TablesArgs, out: Printer) -> Result<()> {
    let codes = if a.codes.is_empty() {
        reference_codes().to_vec()
    } else {
        a.codes.clone()
    };
    let mut rows = Vec::with_capacity(codes.len());
    for &p in &codes {
        let entries = count_entries(p)?;
        if entries > a.cap {
            return Err(Error::TableCapExceeded {
                params: p,
                entries,
                cap: a.cap,
            }
            .into());
        }
        rows.push((p, entries, address_bits(p)?, table_storage_bits(p)?));
    }
    out.note(&format!(
        "{:<8} {:>10} {:>6} {:>12} {:>12}",
        "code", "T", "I", "S_T bits", "S_T KB"
    ));
    for (p, entries, bits, st) in rows {
        out.emit(
            json!({
                "n": p.n(), "k": p.k(), "entries": entries, "index_bits": bits,
                "table_bits": st, "table_kb": bits_to_kb(st),
            }),
            || {
                format!(
                    "{:<8} {:>10} {:>6} {:>12} {:>12.3}",
                    p.to_string(),
                    entries,
                    bits,
                    st,
                    bits_to_kb(st)
                )
            },
        );
    }
    Ok(())
}

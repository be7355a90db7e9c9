//! JSON serialization with fixed 17-significant-digit reals, so every `f64`
//! round-trips exactly and repeated saves are byte-identical.

use serde::Serialize;
use std::io;

pub(crate) struct F17Formatter;

impl serde_json::ser::Formatter for F17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn to_string_f17<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, F17Formatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits valid utf-8"))
}

/// Formats one real with 17 significant digits for CSV cells.
pub(crate) fn f64_cell(value: f64) -> String {
    format!("{value:.16e}")
}

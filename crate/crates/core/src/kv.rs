//! Flat `key = value` text files used for configs and synthetic specs.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// Keys not in `allowed` and duplicate keys are errors.
pub(crate) fn parse(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key=value, got {raw:?}",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if !allowed.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown key {key:?}",
                lineno + 1
            )));
        }
        if out
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

pub(crate) fn take<T: FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    slot: &mut T,
) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *slot = raw
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let m = parse("a = 1\n# c\n\nb=x # trailing\n", &["a", "b"]).unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x");
        assert!(matches!(parse("zz=1", &["a"]), Err(Error::Config(_))));
        assert!(matches!(parse("a=1\na=2", &["a"]), Err(Error::Config(_))));
        assert!(matches!(parse("novalue", &["a"]), Err(Error::Config(_))));
    }

    #[test]
    fn take_reports_bad_values() {
        let m = parse("a=abc", &["a"]).unwrap();
        let mut v = 0usize;
        assert!(take(&m, "a", &mut v).is_err());
        let mut untouched = 5usize;
        take(&m, "b", &mut untouched).unwrap();
        assert_eq!(untouched, 5);
    }
}

//! Byte-size parsing for capacities given on the command line or in configs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid byte size {0:?}: expected an integer with an optional unit (B, KB, MB, GB, TB, KiB, MiB, GiB, TiB)")]
pub struct ParseSizeError(pub String);

/// Parses `"12GiB"`, `"12 GB"`, `"4096"`. Binary suffixes (KiB, MiB, GiB,
/// TiB) are powers of 1024, decimal ones (KB, MB, GB, TB) powers of 1000.
/// A fractional count is accepted when the result is a whole number of
/// bytes, e.g. `"1.5KiB"`.
pub fn parse_size(text: &str) -> Result<u64, ParseSizeError> {
    let err = || ParseSizeError(text.to_string());
    let t = text.trim();
    let split = t
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '_'))
        .unwrap_or(t.len());
    let (number, unit) = t.split_at(split);
    let number = number.replace('_', "");
    if number.is_empty() {
        return Err(err());
    }
    let multiplier: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" | "k" => 1_000,
        "mb" | "m" => 1_000_000,
        "gb" | "g" => 1_000_000_000,
        "tb" | "t" => 1_000_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        "tib" => 1 << 40,
        _ => return Err(err()),
    };
    match number.split_once('.') {
        None => number
            .parse::<u64>()
            .ok()
            .and_then(|n| n.checked_mul(multiplier))
            .ok_or_else(err),
        Some((whole, frac)) => {
            if frac.is_empty() || frac.contains('.') || frac.len() > 18 {
                return Err(err());
            }
            let scale = 10u128.pow(frac.len() as u32);
            let whole: u128 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| err())? };
            let frac: u128 = frac.parse().map_err(|_| err())?;
            let scaled = (whole * scale + frac) * u128::from(multiplier);
            if scaled % scale != 0 {
                return Err(err());
            }
            u64::try_from(scaled / scale).map_err(|_| err())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units() {
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("12GiB"), Ok(12 << 30));
        assert_eq!(parse_size("12 GB"), Ok(12_000_000_000));
        assert_eq!(parse_size("2mib"), Ok(2 << 20));
        assert_eq!(parse_size("1.5KiB"), Ok(1536));
        assert_eq!(parse_size("1_000"), Ok(1000));
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "GiB", "12 parsecs", "0.3B", "-5", "1.2.3KB", "99999999999TiB"] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }
}

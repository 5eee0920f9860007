//! Lossless hexadecimal float literals (`0x1.8p+1`), the format used for
//! codebook edges.

/// Formats a finite `f64` as a C99-style hexadecimal literal.
pub(crate) fn format(x: f64) -> String {
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    let (lead, e) = match (exp, mant) {
        (0, 0) => return format!("{sign}0x0p+0"),
        (0, _) => (0, -1022),
        _ => (1, exp - 1023),
    };
    let frac = format!("{mant:013x}");
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{e:+}")
    }
}

/// Parses the output of [`format`]. Returns `None` on anything else,
/// including literals that would need rounding.
pub(crate) fn parse(s: &str) -> Option<f64> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))?;
    let (mantissa, exp) = rest.split_once(['p', 'P'])?;
    let exp: i64 = exp.parse().ok()?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) if !f.is_empty() => (l, f),
        Some(_) => return None,
        None => (mantissa, ""),
    };
    if frac.len() > 13 || !frac.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let mant = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).ok()? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "1" => {
            let biased = exp + 1023;
            if !(1..=2046).contains(&biased) {
                return None;
            }
            ((biased as u64) << 52) | mant
        }
        "0" if mant == 0 => 0,
        "0" if exp == -1022 => mant,
        _ => return None,
    };
    let sign = if neg { 1u64 << 63 } else { 0 };
    Some(f64::from_bits(sign | bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_literals() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(-0.5), "-0x1p-1");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(1.0 / 3.0), "0x1.5555555555555p-2");
        assert_eq!(parse("0x1.8p+1"), Some(3.0));
    }

    #[test]
    fn round_trips_bit_exactly() {
        for x in [
            1.0 / 3.0,
            -0.0,
            f64::MIN_POSITIVE,
            f64::MIN_POSITIVE / 3.0,
            f64::MAX,
            -1e-300,
            45150.383,
            0.1,
        ] {
            assert_eq!(parse(&format(x)).unwrap().to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "1.5", "0x", "0x2p+0", "0x1.p+0", "0x1.00000000000001p+0", "0x1p+5000"] {
            assert_eq!(parse(s), None, "{s}");
        }
    }
}

//! Criteo display-advertising TSV: label, 13 integer columns, 26 hashed
//! categorical columns.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::batch::{Feature, Sample};
use crate::error::{DesError, Result};
use crate::store::FeatureKey;

pub const N_INT: usize = 13;
pub const N_CAT: usize = 26;
pub const N_COLUMNS: usize = 1 + N_INT + N_CAT;
pub const N_FIELDS: u32 = (N_INT + N_CAT) as u32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriteoRecord {
    pub label: u8,
    pub ints: [Option<i64>; N_INT],
    pub cats: [Option<String>; N_CAT],
}

pub fn parse_criteo(line: &str, line_no: usize) -> Result<CriteoRecord> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != N_COLUMNS {
        return Err(DesError::Parse {
            line: line_no,
            detail: format!("expected {N_COLUMNS} tab-separated fields, found {}", cols.len()),
        });
    }
    let label = match cols[0] {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(DesError::Parse {
                line: line_no,
                detail: format!("label `{other}` is not 0 or 1"),
            })
        }
    };
    let mut ints = [None; N_INT];
    for (i, slot) in ints.iter_mut().enumerate() {
        let raw = cols[1 + i];
        if !raw.is_empty() {
            *slot = Some(raw.parse::<i64>().map_err(|e| DesError::Parse {
                line: line_no,
                detail: format!("integer column I{}: `{raw}`: {e}", i + 1),
            })?);
        }
    }
    let cats: [Option<String>; N_CAT] = std::array::from_fn(|j| {
        let raw = cols[1 + N_INT + j];
        (!raw.is_empty()).then(|| raw.to_string())
    });
    Ok(CriteoRecord { label, ints, cats })
}

/// `ln(1 + x)` for non-negative `x`, 0 otherwise.
pub fn log_transform(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// Integer column `i` becomes field `i` with value `ln(1 + max(x, 0))`;
/// categorical column `j` becomes field `13 + j` with value 1. Missing columns
/// emit nothing.
pub fn featurize(record: &CriteoRecord, seed: u64) -> Vec<Feature> {
    let mut out = Vec::with_capacity(N_INT + N_CAT);
    for (i, x) in record.ints.iter().enumerate() {
        if let Some(x) = *x {
            let key = FeatureKey::from_token(i as u32, &format!("I{}", i + 1), seed);
            out.push(Feature::new(key, log_transform(x as f64)));
        }
    }
    for (j, tok) in record.cats.iter().enumerate() {
        if let Some(tok) = tok {
            let field = (N_INT + j) as u32;
            let key = FeatureKey::from_token(field, &format!("C{}:{tok}", j + 1), seed);
            out.push(Feature::new(key, 1.0));
        }
    }
    out
}

/// Reads up to `max_lines` records (all when `None`), in file order.
pub fn read_criteo(path: &Path, max_lines: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if max_lines.is_some_and(|m| i >= m) {
            break;
        }
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_criteo(&line, i + 1)?;
        out.push(Sample {
            label: rec.label,
            features: featurize(&rec, seed),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn full_line() -> String {
        let mut cols = vec!["1".to_string()];
        cols.extend((0..N_INT).map(|i| i.to_string()));
        cols.extend((0..N_CAT).map(|j| format!("{:08x}", j * 977)));
        cols.join("\t")
    }

    #[test]
    fn full_record() {
        let r = parse_criteo(&full_line(), 1).unwrap();
        assert_eq!(r.label, 1);
        assert!(r.ints.iter().all(Option::is_some));
        assert!(r.cats.iter().all(Option::is_some));
        assert_eq!(featurize(&r, 0).len(), N_INT + N_CAT);
    }

    #[test]
    fn empty_slots_become_absent() {
        let mut cols: Vec<String> = full_line().split('\t').map(String::from).collect();
        cols[3] = String::new();
        cols[20] = String::new();
        let r = parse_criteo(&cols.join("\t"), 1).unwrap();
        assert_eq!(r.ints[2], None);
        assert_eq!(r.cats[20 - 1 - N_INT], None);
        let feats = featurize(&r, 0);
        assert_eq!(feats.len(), N_INT + N_CAT - 2);
        assert!(feats.iter().all(|f| f.key.field != 2 && f.key.field != 19));
        assert!(feats.iter().all(|f| f.key.field < N_FIELDS));
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse_criteo("1\t2\t3", 17).unwrap_err();
        assert!(matches!(err, DesError::Parse { line: 17, .. }));
        assert!(parse_criteo(&full_line().replacen('1', "7", 1), 2).is_err());
    }

    #[test]
    fn continuous_transform() {
        let mut cols: Vec<String> = full_line().split('\t').map(String::from).collect();
        cols[1] = "0".into();
        cols[2] = "-3".into();
        let r = parse_criteo(&cols.join("\t"), 1).unwrap();
        let f = featurize(&r, 0);
        assert_eq!(f[0].value, 0.0);
        assert_eq!(f[1].value, 0.0);
        assert!((log_transform(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(log_transform(-2.5), 0.0);
    }

    #[test]
    fn identical_tokens_hash_identically() {
        let a = featurize(&parse_criteo(&full_line(), 1).unwrap(), 9);
        let b = featurize(&parse_criteo(&full_line(), 2).unwrap(), 9);
        assert_eq!(a, b);
        let c = featurize(&parse_criteo(&full_line(), 2).unwrap(), 10);
        assert_ne!(a[N_INT].key, c[N_INT].key);
    }

    #[test]
    fn fixture_histogram_matches_byte_scanner() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut text = String::new();
        for _ in 0..1000 {
            let mut cols = vec![if rng.gen_bool(0.3) { "1" } else { "0" }.to_string()];
            for _ in 0..N_INT {
                cols.push(if rng.gen_bool(0.2) {
                    String::new()
                } else {
                    rng.gen_range(-5..1000).to_string()
                });
            }
            for _ in 0..N_CAT {
                cols.push(if rng.gen_bool(0.25) {
                    String::new()
                } else {
                    format!("{:08x}", rng.gen::<u32>())
                });
            }
            text.push_str(&cols.join("\t"));
            text.push('\n');
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.tsv");
        std::fs::write(&path, &text).unwrap();

        // oracle: walk bytes, count non-empty cells per column
        let mut oracle = vec![0usize; N_COLUMNS];
        for line in text.as_bytes().split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            let (mut col, mut len) = (0usize, 0usize);
            for &b in line {
                if b == b'\t' {
                    oracle[col] += (len > 0) as usize;
                    col += 1;
                    len = 0;
                } else {
                    len += 1;
                }
            }
            oracle[col] += (len > 0) as usize;
            assert_eq!(col + 1, N_COLUMNS);
        }

        let mut hist = vec![0usize; N_COLUMNS];
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let r = parse_criteo(line, i + 1).unwrap();
            n += 1;
            hist[0] += 1;
            for (k, x) in r.ints.iter().enumerate() {
                hist[1 + k] += x.is_some() as usize;
            }
            for (k, x) in r.cats.iter().enumerate() {
                hist[1 + N_INT + k] += x.is_some() as usize;
            }
        }
        assert_eq!(n, 1000);
        assert_eq!(hist, oracle);
        assert_eq!(read_criteo(&path, None, 0).unwrap().len(), 1000);
        assert_eq!(read_criteo(&path, Some(10), 0).unwrap().len(), 10);
    }
}

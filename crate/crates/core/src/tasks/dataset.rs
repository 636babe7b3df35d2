//! Binary and CSV storage for clustering datasets.
//!
//! Binary layout, little-endian throughout: magic `MOGD`, then `version`, `n`,
//! `D`, `k` as u64, then `n*D` f64 points, `n` u64 labels, `k` f64 weights,
//! `k*D` f64 means and `k*D` f64 scales.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tasks::ari::ClusterLabels;
use crate::tasks::mog::{MogDataset, MogParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MOGD";
pub const DATASET_VERSION: u64 = 1;

// Header fields are bounded so a corrupt file cannot request huge buffers.
const MAX_ENTRIES: u64 = 1 << 32;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write_dataset(w: &mut impl Write, ds: &MogDataset) -> Result<()> {
    let (n, dim, k) = (ds.points.rows(), ds.points.cols(), ds.params.k());
    if ds.labels.len() != n || ds.params.dim() != dim {
        return Err(Error::Contract("dataset parts disagree in size".into()));
    }
    w.write_all(MAGIC)?;
    for v in [DATASET_VERSION, n as u64, dim as u64, k as u64] {
        put_u64(w, v)?;
    }
    put_f64s(w, ds.points.data())?;
    for &z in &ds.labels.0 {
        put_u64(w, z as u64)?;
    }
    put_f64s(w, &ds.params.pi)?;
    put_f64s(w, ds.params.mu.data())?;
    put_f64s(w, ds.params.sigma.data())?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<MogDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = get_u64(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (n, dim, k) = (get_u64(r)?, get_u64(r)?, get_u64(r)?);
    if n.saturating_mul(dim) > MAX_ENTRIES || k.saturating_mul(dim) > MAX_ENTRIES {
        return Err(Error::Format(format!("implausible header n={n} D={dim} k={k}")));
    }
    let (n, dim, k) = (n as usize, dim as usize, k as usize);
    let points = Tensor::from_vec(n, dim, get_f64s(r, n * dim)?)?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z = get_u64(r)? as usize;
        if z >= k {
            return Err(Error::Format(format!("label {z} of point {i} exceeds k={k}")));
        }
        labels.push(z);
    }
    let pi = get_f64s(r, k)?;
    let mu = Tensor::from_vec(k, dim, get_f64s(r, k * dim)?)?;
    let sigma = Tensor::from_vec(k, dim, get_f64s(r, k * dim)?)?;
    Ok(MogDataset {
        points,
        labels: ClusterLabels(labels),
        params: MogParams { pi, mu, sigma },
    })
}

/// One row per point: coordinates then label, with a `x0,..,label` header.
pub fn write_dataset_csv(w: &mut impl Write, ds: &MogDataset) -> Result<()> {
    let dim = ds.points.cols();
    let header: Vec<String> = (0..dim).map(|d| format!("x{d}")).chain(["label".to_string()]).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.points.rows() {
        for v in ds.points.row(i) {
            write!(w, "{v},")?;
        }
        writeln!(w, "{}", ds.labels.0[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tasks::mog::{gen_synthetic_mog, MogGenConfig};

    #[test]
    fn binary_round_trip_is_exact() {
        let ds = gen_synthetic_mog(&mut Rng::new(3), &MogGenConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(&buf[..4], b"MOGD");
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let ds = gen_synthetic_mog(&mut Rng::new(3), &MogGenConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(read_dataset(&mut &short[..]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ds = gen_synthetic_mog(&mut Rng::new(4), &MogGenConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,label");
        assert_eq!(lines.len(), ds.points.rows() + 1);
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first[0], ds.points.get(0, 0));
    }
}

//! Binary feature-matrix dump: magic, frame count, dimension, then
//! little-endian f64 data. Used for test fixtures and the optional feature
//! cache.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AudioError, FeatureMatrix};

const MAGIC: &[u8; 4] = b"SVFM";

pub fn write_feature_matrix(path: &Path, feats: &FeatureMatrix) -> Result<(), AudioError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(feats.num_frames() as u64).to_le_bytes())?;
    w.write_all(&(feats.dim() as u64).to_le_bytes())?;
    for v in feats.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix, AudioError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AudioError::Format(format!(
            "{}: bad feature-file magic",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let t = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8) as usize;
    let mut data = Vec::with_capacity(t * dim);
    for _ in 0..t * dim {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    FeatureMatrix::new(dim.max(1), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_dump_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        let feats = FeatureMatrix::new(3, (0..27).map(|i| i as f64 * 0.37 - 2.0).collect())
            .unwrap();
        write_feature_matrix(&path, &feats).unwrap();
        let back = read_feature_matrix(&path).unwrap();
        assert_eq!(back, feats);
    }
}

//! Versioned parameter container.
//!
//! Layout (little-endian): magic `HWCK`, u32 version, u64 step, u32 config
//! length + UTF-8 config text, u32 section count, then per section a
//! length-prefixed name and u32 entry count; per entry a length-prefixed
//! name, u32 rows, u32 cols and `rows·cols` f32 values.

use std::io::{Read, Write};
use std::path::Path;

use drivewm_nn::{ParamStore, Precision, Shape};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HWCK";
pub const VERSION: u32 = 1;

pub const SECTIONS: [&str; 7] =
    ["encoder_student", "encoder_teacher", "predictor", "rssm", "actor", "critic", "embed_norm"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    pub sections: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&ParamStore> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("checkpoint has no section `{name}`")))
    }

    /// Copy `name` into a store matching `template`'s layout.
    pub fn restore_into(&self, name: &str, template: &ParamStore) -> Result<ParamStore> {
        let stored = self.section(name)?;
        stored
            .check_layout(template)
            .map_err(|e| Error::Config(format!("checkpoint section `{name}` does not match the configuration: {e}")))?;
        Ok(stored.with_precision(template.precision()))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_str(w, &self.config_text)?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, store) in &self.sections {
            write_str(w, name)?;
            w.write_all(&(store.len() as u32).to_le_bytes())?;
            for (pname, entry) in store.iter() {
                write_str(w, pname)?;
                w.write_all(&(entry.shape.rows as u32).to_le_bytes())?;
                w.write_all(&(entry.shape.cols as u32).to_le_bytes())?;
                for &v in &entry.values {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic: expected {MAGIC:?}, found {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version: expected {VERSION}, found {version}")));
        }
        let mut step = [0u8; 8];
        read_exact(r, &mut step)?;
        let step = u64::from_le_bytes(step);
        let config_text = read_str(r)?;
        let count = read_u32(r)?;
        let mut sections = Vec::with_capacity(count.min(64) as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let entries = read_u32(r)?;
            let mut store = ParamStore::new(Precision::F32);
            for _ in 0..entries {
                let pname = read_str(r)?;
                let rows = read_u32(r)? as usize;
                let cols = read_u32(r)? as usize;
                let n = rows
                    .checked_mul(cols)
                    .filter(|&n| n <= 1 << 28)
                    .ok_or_else(|| Error::Format(format!("entry `{pname}` has implausible shape {rows}×{cols}")))?;
                let mut buf = vec![0u8; n * 4];
                read_exact(r, &mut buf)?;
                let values = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
                store.insert(&pname, Shape::new(rows, cols), values)?;
            }
            sections.push((name, store));
        }
        Ok(Self { step, config_text, sections })
    }

    /// Write to `path` through a temporary file so a failed save leaves no partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Format(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read(&mut std::io::BufReader::new(f))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("string length {n} exceeds limit")));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use drivewm_nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sections = SECTIONS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut s = ParamStore::new(Precision::F32);
                s.add("w", Shape::new(i + 1, 3), Init::TruncatedNormalFanIn { scale: 1.0 }, &mut rng).unwrap();
                s.add("b", Shape::new(1, 3), Init::Constant(0.25), &mut rng).unwrap();
                (name.to_string(), s)
            })
            .collect();
        Checkpoint { step: 42, config_text: "seed = 7\n".into(), sections }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut v = Vec::new();
        c.write(&mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let b = bytes(&c);
        let back = Checkpoint::read(&mut b.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn truncated_and_corrupt_files_fail_cleanly() {
        let b = bytes(&sample());
        for cut in [0, 3, 10, b.len() / 2, b.len() - 1] {
            let err = Checkpoint::read(&mut &b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "{err}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(&mut bad.as_slice()).unwrap_err().to_string().contains("magic"));
        let mut bad = b;
        bad[4] = 9;
        let e = Checkpoint::read(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(e.contains("expected 1") && e.contains("found 9"), "{e}");
    }

    #[test]
    fn mismatched_layout_names_the_section() {
        let c = sample();
        let mut other = ParamStore::new(Precision::F32);
        other.insert("w", Shape::new(2, 2), vec![0.0; 4]).unwrap();
        let e = c.restore_into("rssm", &other).unwrap_err().to_string();
        assert!(e.contains("rssm"), "{e}");
        assert!(c.restore_into("nope", &other).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.hwck");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }
}

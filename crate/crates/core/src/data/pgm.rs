//! Binary PGM (P5) reading and writing, plus whole-dataset storage as a
//! directory of PGMs under a JSON manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FaceDataset, GrayImage, LabeledImage};
use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    out.extend_from_slice(&image.pixels);
    atomic_write(path, &out)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then_some((start, pos))
    };

    let (s, e) = token(&bytes).ok_or_else(|| bad("missing magic"))?;
    if &bytes[s..e] != b"P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let (s, e) = token(&bytes).ok_or_else(|| bad("truncated header"))?;
        *d = std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before pixel data"));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| bad("image dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(bad(&format!(
            "expected {expected} pixel bytes, found {}",
            data.len()
        )));
    }
    GrayImage::from_pixels(width, height, data.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image_id: String,
    identity: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    images: Vec<ManifestEntry>,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write every image as `<identity>/<image>.pgm` plus a `manifest.json`
/// preserving exact ids and dataset order.
pub fn save_dataset(dir: &Path, ds: &FaceDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, l) in ds.images.iter().enumerate() {
        let sub = sanitize(&l.identity);
        let file = format!("{sub}/{i:06}.pgm");
        let path = dir.join(&file);
        fs::create_dir_all(path.parent().expect("file path has a parent"))?;
        write_pgm(&path, &l.image)?;
        entries.push(ManifestEntry {
            image_id: l.image_id.clone(),
            identity: l.identity.clone(),
            file,
        });
    }
    let manifest = Manifest { images: entries };
    let json = serde_json::to_vec_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), &json)
}

pub fn load_dataset(dir: &Path) -> Result<FaceDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let images = manifest
        .images
        .into_iter()
        .map(|e| {
            let rel = PathBuf::from(&e.file);
            if rel.is_absolute()
                || rel
                    .components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(Error::Format(format!("manifest path {} escapes the dataset", e.file)));
            }
            Ok(LabeledImage {
                image_id: e.image_id,
                identity: e.identity,
                image: read_pgm(&dir.join(rel))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaceDataset { images })
}

/// Write via a temporary file in the same directory, then rename into place,
/// so readers never observe partial content.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    #[test]
    fn pgm_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_pixels(5, 3, (0u8..15).collect()).unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);

        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 15);
    }

    #[test]
    fn pgm_reader_handles_comments_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("c.pgm");
        fs::write(&ok, b"P5 # binary\n# size next\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        let img = read_pgm(&ok).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);

        for (name, content) in [
            ("ascii.pgm", b"P2\n2 2\n255\n1 2 3 4".to_vec()),
            ("short.pgm", b"P5\n2 2\n255\n\x01\x02".to_vec()),
            ("long.pgm", b"P5\n2 2\n255\n\x01\x02\x03\x04\x05".to_vec()),
            ("maxval.pgm", b"P5\n2 2\n999\n\x01\x02\x03\x04".to_vec()),
            ("header.pgm", b"P5\n2\n255\n".to_vec()),
        ] {
            let p = dir.path().join(name);
            fs::write(&p, content).unwrap();
            assert!(read_pgm(&p).is_err(), "{name} should be rejected");
        }
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let cfg = SynthConfig {
            num_identities: 3,
            images_per_identity: 2,
            height: 12,
            width: 12,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);

        // Rewriting produces identical bytes.
        let manifest_before = fs::read(dir.path().join("manifest.json")).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let manifest_after = fs::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest_before, manifest_after);
    }

    #[test]
    fn manifest_escape_paths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = br#"{"images":[{"image_id":"a","identity":"a","file":"../../etc/x.pgm"}]}"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}

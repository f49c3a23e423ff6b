//! IDX image/label containers (the MNIST wire format): big-endian magic and
//! dimensions, raw unsigned bytes. Images load flattened with pixels scaled
//! to [0, 1].

use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data(format!("{}: truncated reading {}", path.display(), what)))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an images/labels pair. Every row is supervised; class_count is the
/// highest label + 1.
pub fn load_idx_images(
    images_path: &Path,
    labels_path: &Path,
    domain_id: &str,
) -> Result<Dataset> {
    let mut imgf = std::fs::File::open(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32(&mut imgf, images_path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:#010x}, expected {:#010x} (IDX images)",
            images_path.display(),
            magic,
            IMAGES_MAGIC
        )));
    }
    let count = read_u32(&mut imgf, images_path, "image count")? as usize;
    let h = read_u32(&mut imgf, images_path, "height")? as usize;
    let w = read_u32(&mut imgf, images_path, "width")? as usize;
    let mut pixels = vec![0u8; count * h * w];
    imgf.read_exact(&mut pixels)
        .map_err(|_| Error::Data(format!("{}: truncated pixel data", images_path.display())))?;

    let mut lblf = std::fs::File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32(&mut lblf, labels_path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:#010x}, expected {:#010x} (IDX labels)",
            labels_path.display(),
            magic,
            LABELS_MAGIC
        )));
    }
    let lcount = read_u32(&mut lblf, labels_path, "label count")? as usize;
    if lcount != count {
        return Err(Error::Data(format!(
            "{} images but {} labels ({}, {})",
            count,
            lcount,
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut raw = vec![0u8; count];
    lblf.read_exact(&mut raw)
        .map_err(|_| Error::Data(format!("{}: truncated label data", labels_path.display())))?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<Option<usize>> = raw.iter().map(|&l| Some(l as usize)).collect();
    let class_count = raw.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    let ds = Dataset {
        domain_id: domain_id.to_string(),
        x: Tensor::new(vec![count, h * w], data)?,
        labels,
        sup_mask: vec![true; count],
        class_count,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write an images/labels pair. `x` rows must be h*w values in [0, 1]; they
/// are quantized to bytes by rounding v*255.
pub fn write_idx_images(
    x: &Tensor,
    labels: &[usize],
    h: usize,
    w: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if x.rank() != 2 || x.cols() != h * w {
        return Err(Error::Shape {
            op: "write_idx_images",
            detail: format!("expected [N, {}], got {:?}", h * w, x.shape()),
        });
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            op: "write_idx_images",
            detail: format!("{} labels for {} images", labels.len(), x.rows()),
        });
    }
    let n = x.rows();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in x.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!(
                "write_idx_images: pixel {} outside [0, 1]",
                v
            )));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in labels {
        if l > u8::MAX as usize {
            return Err(Error::Invalid(format!("write_idx_images: label {} > 255", l)));
        }
        lbl.push(l as u8);
    }
    crate::ioutil::write_atomic(images_path, &img)?;
    crate::ioutil::write_atomic(labels_path, &lbl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Two 2x2 images: [0,255,128,64] and [255,0,0,255]; labels 1, 0.
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 255, 128, 64, 255, 0, 0, 255]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 0]);
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_handcrafted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let ds = load_idx_images(&ip, &lp, "digits").unwrap();
        assert_eq!(ds.x.shape(), &[2, 4]);
        assert_eq!(ds.x.row(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(ds.x.row(1), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.labels, vec![Some(1), Some(0)]);
        assert_eq!(ds.class_count, 2);
    }

    #[test]
    fn bad_magic_truncation_and_count_mismatch_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());

        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_idx_images(&bad, &lp, "d").unwrap_err().to_string().contains("magic"));

        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_idx_images(&bad, &lp, "d").unwrap_err().to_string().contains("truncated"));

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&3u32.to_be_bytes());
        lbl.extend_from_slice(&[1, 0, 1]);
        let lp3 = dir.path().join("three.idx");
        std::fs::write(&lp3, lbl).unwrap();
        assert!(load_idx_images(&ip, &lp3, "d").unwrap_err().to_string().contains("labels"));
    }

    #[test]
    fn write_then_load_roundtrips_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::from_rows(&[
            vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0],
            vec![1.0, 0.5019607843137255, 0.0, 1.0], // 128/255 exactly
        ])
        .unwrap();
        let ip = dir.path().join("w.idx");
        let lp = dir.path().join("wl.idx");
        write_idx_images(&x, &[3, 7], 2, 2, &ip, &lp).unwrap();
        let ds = load_idx_images(&ip, &lp, "d").unwrap();
        assert_eq!(ds.x, x);
        assert_eq!(ds.labels, vec![Some(3), Some(7)]);
        assert_eq!(ds.class_count, 8);
    }
}

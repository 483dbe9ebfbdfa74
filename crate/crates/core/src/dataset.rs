//! On-disk artifacts: PGM masks, dataset manifests, and the CSV files
//! written by training and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::iar::{PointOrigin, PointSet};
use crate::metrics::{Mask, MetricsReport};

/// Write a mask as binary PGM (P5); the label value is the gray level.
pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    bytes.extend_from_slice(mask.data());
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

fn parse_pgm(bytes: &[u8], path: &str) -> Result<Mask> {
    let err = |offset: usize, detail: &str| Error::Parse {
        path: path.to_string(),
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(err(0, "expected P5 magic"));
    }
    // Header: three whitespace-separated fields (width, height, maxval)
    // after the magic, then a single whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, "expected decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| err(start, "header field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "expected whitespace before raster"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, "maxval must be in [1, 255]"));
    }
    let expected = w * h;
    if bytes.len() - pos != expected {
        return Err(err(
            pos,
            &format!("raster is {} bytes, expected {}", bytes.len() - pos, expected),
        ));
    }
    Mask::new(h, w, bytes[pos..].to_vec())
}

/// Line-oriented index of sample file pairs: `image<TAB>label` per line,
/// paths relative to the manifest's directory.
pub fn write_manifest(path: impl AsRef<Path>, pairs: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (img, lab) in pairs {
        text.push_str(img);
        text.push('\t');
        text.push_str(lab);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img, lab) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            offset: i,
            detail: "expected image<TAB>label".to_string(),
        })?;
        out.push((base.join(img), base.join(lab)));
    }
    Ok(out)
}

/// Metrics CSV rows: one per (sample, class), plus per-class `mean` rows.
pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    reports: &[(String, &MetricsReport)],
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("sample,class,dsc,jaccard,hd95,asd\n");
    for (sample, report) in reports {
        for (c, m) in report.per_class.iter().enumerate() {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sample, c, m.dsc, m.jaccard, m.hd95, m.asd
            ));
        }
    }
    if !reports.is_empty() {
        let k = reports[0].1.per_class.len();
        for c in 0..k {
            let n = reports.len() as f64;
            let (mut dsc, mut jac, mut hd, mut asd) = (0.0, 0.0, 0.0, 0.0);
            for (_, r) in reports {
                dsc += r.per_class[c].dsc;
                jac += r.per_class[c].jaccard;
                hd += r.per_class[c].hd95;
                asd += r.per_class[c].asd;
            }
            text.push_str(&format!(
                "mean,{},{},{},{},{}\n",
                c,
                dsc / n,
                jac / n,
                hd / n,
                asd / n
            ));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Point dump: `x,y,origin,uncertainty` per selected point.
pub fn write_points_csv(
    path: impl AsRef<Path>,
    points: &PointSet,
    uncertainty: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("x,y,origin,uncertainty\n");
    for (i, &(x, y)) in points.coords.iter().enumerate() {
        let origin = match points.origins[i] {
            PointOrigin::Uncertain => "uncertain",
            PointOrigin::Uniform => "uniform",
        };
        text.push_str(&format!("{},{},{},{}\n", x, y, origin, uncertainty[i]));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Append-per-step training log with the fixed header
/// `iter,lr,lambda_t,l_sup,l_rend,l_total`.
pub struct TrainLog {
    file: std::io::BufWriter<fs::File>,
    path: String,
}

impl TrainLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::io::BufWriter::new(
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        file.write_all(b"iter,lr,lambda_t,l_sup,l_rend,l_total\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TrainLog {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn record(
        &mut self,
        iter: usize,
        lr: f64,
        lambda_t: f64,
        l_sup: f64,
        l_rend: f64,
        l_total: f64,
    ) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{}",
            iter, lr, lambda_t, l_sup, l_rend, l_total
        )
        .map_err(|e| Error::io(self.path.clone(), e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file
            .flush()
            .map_err(|e| Error::io(self.path.clone(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = std::env::temp_dir().join(format!("morse-pgm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut m = Mask::zeros(5, 7);
        for (i, y) in (0..5).enumerate() {
            m.set(y, i % 7, (i % 3) as u8);
        }
        let path = dir.join("m.pgm");
        write_pgm(&path, &m).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(m, back);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_pgm_names_offset() {
        let err = parse_pgm(b"P5\n3 x\n255\n", "x.pgm").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("offset"), "{msg}");

        let err = parse_pgm(b"P6\n1 1\n255\n\x00", "x.pgm").unwrap_err();
        assert!(err.to_string().contains("P5"));

        // Truncated raster.
        let err = parse_pgm(b"P5\n2 2\n255\n\x00\x01\x02", "x.pgm").unwrap_err();
        assert!(err.to_string().contains("expected 4"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join(format!("morse-man-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let pairs = vec![
            ("img_000.mten".to_string(), "lab_000.pgm".to_string()),
            ("img_001.mten".to_string(), "lab_001.pgm".to_string()),
        ];
        let path = dir.join("manifest.txt");
        write_manifest(&path, &pairs).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, dir.join("img_000.mten"));
        assert_eq!(back[1].1, dir.join("lab_001.pgm"));
        fs::remove_dir_all(&dir).unwrap();
    }
}

//! Point clouds: the discrete initial law `p_0 = (1/|I|) sum_i delta(x - x_i)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, uniformly weighted set of points in `R^dim`, optionally labeled.
///
/// Points are stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(dim: usize, data: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Usage("point dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::Usage("point cloud must be nonempty".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Usage(format!(
                "buffer of {} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite coordinate at index {i}")));
        }
        let n = data.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Usage(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(Self { dim, data, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<u32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Usage("rows have differing dimensions".into()));
        }
        Self::new(dim, rows.concat(), labels)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Largest pairwise Euclidean distance.
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(sq_dist(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.points() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header row".into(),
            });
        }
        let has_label = headers.iter().next_back() == Some("label");
        let dim = headers.len() - usize::from(has_label);
        for (k, h) in headers.iter().take(dim).enumerate() {
            if h != format!("x{k}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected column x{k}, found {h:?}"),
                });
            }
        }
        if dim == 0 {
            return Err(Error::Parse {
                line: 1,
                msg: "no coordinate columns".into(),
            });
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            for k in 0..dim {
                let v: f64 = rec[k].parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid number {:?}", &rec[k]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: "non-finite coordinate".into(),
                    });
                }
                data.push(v);
            }
            if has_label {
                let l: u32 = rec[dim].parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid label {:?}", &rec[dim]),
                })?;
                labels.push(l);
            }
        }
        if data.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "no data rows".into(),
            });
        }
        Self::new(dim, data, has_label.then_some(labels))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|&v| fmt_f64(v)).collect();
            if let Some(l) = self.label(i) {
                row.push(l.to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Locale-independent decimal with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

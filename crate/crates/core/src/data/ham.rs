use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::split::split;
use super::{one_hot, ImageParty, LabelParty, TabularParty, VerticalDataset};

/// Diagnostic categories in label-index order.
pub const HAM_CLASSES: [&str; 7] = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "PNG", "JPG"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HamOptions {
    /// `(height, width)` after resizing.
    pub target_size: (usize, usize),
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for HamOptions {
    fn default() -> Self {
        HamOptions {
            target_size: (28, 28),
            split_fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MetaRow {
    pub image_id: String,
    pub class: usize,
    pub age: Option<f64>,
    pub sex: String,
    pub localization: String,
}

/// Tabular statistics, fitted on the training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub age_median: f64,
    pub age_mean: f64,
    pub age_std: f64,
    pub sex_levels: Vec<String>,
    pub localization_levels: Vec<String>,
    /// Original `image_id` of each row, in row order.
    pub image_ids: Vec<String>,
}

impl Preprocessing {
    pub(crate) fn fit(rows: &[MetaRow], train: &[usize]) -> Self {
        let mut observed: Vec<f64> = train.iter().filter_map(|&i| rows[i].age).collect();
        observed.sort_by(f64::total_cmp);
        let age_median = match observed.len() {
            0 => 0.0,
            n if n % 2 == 1 => observed[n / 2],
            n => (observed[n / 2 - 1] + observed[n / 2]) / 2.0,
        };
        let imputed: Vec<f64> = train.iter().map(|&i| rows[i].age.unwrap_or(age_median)).collect();
        let (age_mean, age_std) = if imputed.is_empty() {
            (0.0, 1.0)
        } else {
            let m = imputed.iter().sum::<f64>() / imputed.len() as f64;
            let var = imputed.iter().map(|a| (a - m).powi(2)).sum::<f64>() / imputed.len() as f64;
            (m, if var > 0.0 { var.sqrt() } else { 1.0 })
        };
        let levels = |f: fn(&MetaRow) -> &str| -> Vec<String> {
            train
                .iter()
                .map(|&i| f(&rows[i]).to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        Preprocessing {
            age_median,
            age_mean,
            age_std,
            sex_levels: levels(|r| &r.sex),
            localization_levels: levels(|r| &r.localization),
            image_ids: rows.iter().map(|r| r.image_id.clone()).collect(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["age".to_string(), "age_missing".to_string()];
        cols.extend(self.sex_levels.iter().map(|s| format!("sex={s}")));
        cols.extend(self.localization_levels.iter().map(|s| format!("localization={s}")));
        cols
    }

    /// Feature row; categories unseen in training encode as all zeros.
    pub(crate) fn transform(&self, row: &MetaRow) -> Vec<f64> {
        let age = row.age.unwrap_or(self.age_median);
        let mut out = vec![
            (age - self.age_mean) / self.age_std,
            if row.age.is_none() { 1.0 } else { 0.0 },
        ];
        out.extend(self.sex_levels.iter().map(|s| f64::from(u8::from(*s == row.sex))));
        out.extend(self.localization_levels.iter().map(|s| f64::from(u8::from(*s == row.localization))));
        out
    }
}

pub(crate) fn read_metadata(path: &Path) -> Result<Vec<MetaRow>> {
    let ingest = |detail: String| Error::Ingestion(format!("{}: {detail}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| ingest(e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ingest(format!("missing column {name}")))
    };
    let (c_id, c_dx, c_age, c_sex, c_loc) = (col("image_id")?, col("dx")?, col("age")?, col("sex")?, col("localization")?);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ingest(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let dx = field(c_dx);
        let class = HAM_CLASSES
            .iter()
            .position(|&k| k == dx)
            .ok_or_else(|| ingest(format!("row {}: unknown dx value {dx:?}", i + 1)))?;
        let age_text = field(c_age);
        let age = if age_text.is_empty() || age_text.eq_ignore_ascii_case("nan") || age_text == "unknown" {
            None
        } else {
            Some(
                age_text
                    .parse::<f64>()
                    .map_err(|_| ingest(format!("row {}: unparseable age {age_text:?}", i + 1)))?,
            )
        };
        rows.push(MetaRow {
            image_id: field(c_id).to_string(),
            class,
            age,
            sex: field(c_sex).to_string(),
            localization: field(c_loc).to_string(),
        });
    }
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = rows.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(ingest(format!("duplicate image_id {}", w[0].image_id)));
    }
    Ok(rows)
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            let path = dir.join(format!("{id}.png"));
            Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "no image file for this id"))
        })
}

fn load_image(path: &Path, (h, w): (usize, usize), out: &mut Vec<f64>) -> Result<()> {
    let img = image::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let rgb = if img.width() as usize == w && img.height() as usize == h {
        img.to_rgb8()
    } else {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle).to_rgb8()
    };
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.push(f64::from(rgb.get_pixel(x as u32, y as u32)[ch]) / 255.0);
            }
        }
    }
    Ok(())
}

/// Loads a metadata table plus one image per row.
///
/// Rows are ordered by `image_id` and numbered from 0, so the result does
/// not depend on the row order of the file. Tabular statistics are fitted
/// on the training split.
pub fn load_ham_style(metadata: &Path, image_dir: &Path, opts: &HamOptions) -> Result<VerticalDataset> {
    let (h, w) = opts.target_size;
    if h == 0 || w == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let rows = read_metadata(metadata)?;
    let n = rows.len();
    let classes: Vec<usize> = rows.iter().map(|r| r.class).collect();
    let splits = split(&classes, opts.split_fractions, opts.seed)?.splits;
    let pre = Preprocessing::fit(&rows, &splits.train);

    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    for r in &rows {
        load_image(&find_image(image_dir, &r.image_id)?, (h, w), &mut pixels)?;
    }
    let columns = pre.columns();
    let features: Vec<f64> = rows.iter().flat_map(|r| pre.transform(r)).collect();
    let ids: Vec<u32> = (0..n as u32).collect();
    let ds = VerticalDataset {
        image: ImageParty {
            ids: ids.clone(),
            images: Tensor::new(vec![n, 3, h, w], pixels)?,
        },
        tabular: TabularParty {
            ids: ids.clone(),
            features: Tensor::new(vec![n, columns.len()], features)?,
            columns,
        },
        labels: LabelParty {
            ids,
            labels: one_hot(&classes, HAM_CLASSES.len()),
            class_names: HAM_CLASSES.iter().map(|s| s.to_string()).collect(),
        },
        splits,
        latents: None,
        preprocessing: Some(pre),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_fixture(dir: &Path, lines: &[&str]) {
        let mut text = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(dir.join("metadata.csv"), text).unwrap();
        for l in lines {
            let id = l.split(',').nth(1).unwrap();
            let v = id.bytes().last().unwrap();
            let img = image::RgbImage::from_pixel(6, 4, image::Rgb([v, 0, 255]));
            img.save(dir.join(format!("{id}.png"))).unwrap();
        }
    }

    fn all_train() -> HamOptions {
        HamOptions {
            target_size: (4, 6),
            split_fractions: [1.0, 0.0, 0.0],
            seed: 0,
        }
    }

    const TOY: [&str; 3] = [
        "L1,ISIC_1,nv,histo,20,male,back",
        "L2,ISIC_2,mel,histo,,female,face",
        "L3,ISIC_3,bcc,histo,40,male,back",
    ];

    #[test]
    fn toy_fixture_age_handling() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &TOY);
        let ds = load_ham_style(&dir.path().join("metadata.csv"), dir.path(), &all_train()).unwrap();
        assert_eq!(ds.num_classes(), 7);
        let pre = ds.preprocessing.as_ref().unwrap();
        assert_eq!(pre.age_median, 30.0);
        let std = (200.0f64 / 3.0).sqrt();
        let ages: Vec<f64> = (0..3).map(|i| ds.tabular.features.row(i)[0]).collect();
        let expect = [-10.0 / std, 0.0, 10.0 / std];
        for (a, e) in ages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{ages:?}");
        }
        let flags: Vec<f64> = (0..3).map(|i| ds.tabular.features.row(i)[1]).collect();
        assert_eq!(flags, vec![0.0, 1.0, 0.0]);
        assert_eq!(
            ds.tabular.columns,
            vec!["age", "age_missing", "sex=female", "sex=male", "localization=back", "localization=face"]
        );
        assert_eq!(ds.class_indices(), vec![5, 4, 1]);
        assert_eq!(ds.image.images.shape(), &[3, 3, 4, 6]);
        assert_eq!(ds.image.images.data()[0], f64::from(b'1') / 255.0);
        assert_eq!(ds.image.images.data()[2 * 24], 1.0);
    }

    #[test]
    fn row_order_does_not_matter() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_fixture(a.path(), &TOY);
        write_fixture(b.path(), &[TOY[2], TOY[0], TOY[1]]);
        let da = load_ham_style(&a.path().join("metadata.csv"), a.path(), &all_train()).unwrap();
        let db = load_ham_style(&b.path().join("metadata.csv"), b.path(), &all_train()).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn unknown_dx_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &["L1,ISIC_1,nv,h,20,male,back", "L2,ISIC_2,xyz,h,30,male,back"]);
        let err = load_ham_style(&dir.path().join("metadata.csv"), dir.path(), &all_train()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Ingestion(_)));
        assert!(msg.contains("row 2") && msg.contains("xyz"), "{msg}");
    }

    #[test]
    fn missing_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &TOY);
        fs::remove_file(dir.path().join("ISIC_2.png")).unwrap();
        let err = load_ham_style(&dir.path().join("metadata.csv"), dir.path(), &all_train()).unwrap_err();
        assert!(err.to_string().contains("ISIC_2"), "{err}");
    }

    #[test]
    fn statistics_come_from_training_rows_only() {
        let rows: Vec<MetaRow> = [(Some(10.0), "a"), (Some(30.0), "b"), (Some(1000.0), "c"), (None, "a")]
            .iter()
            .enumerate()
            .map(|(i, (age, loc))| MetaRow {
                image_id: format!("{i}"),
                class: 0,
                age: *age,
                sex: "male".into(),
                localization: loc.to_string(),
            })
            .collect();
        let pre = Preprocessing::fit(&rows, &[0, 1, 3]);
        assert_eq!(pre.age_median, 20.0);
        assert_eq!(pre.age_mean, 20.0);
        assert_eq!(pre.localization_levels, vec!["a", "b"]);
        assert_eq!(pre, Preprocessing::fit(&rows, &[0, 1, 3]));
        // The held-out row with an unseen site encodes as zeros there.
        assert_eq!(&pre.transform(&rows[2])[3..], &[0.0, 0.0]);
    }
}

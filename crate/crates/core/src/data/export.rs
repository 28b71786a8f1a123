use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{VerticalDataset, HAM_CLASSES};

const SITES: [&str; 7] = ["back", "face", "trunk", "upper extremity", "lower extremity", "abdomen", "scalp"];

/// Writes `metadata.csv` and one PNG per row in the layout that
/// [`super::load_ham_style`] reads.
///
/// Loaded data gets its metadata back from the fitted statistics. Synthetic
/// data gets metadata derived from its tabular cluster, so only images and
/// labels survive the round trip.
pub fn export_ham_layout(ds: &VerticalDataset, dir: &Path) -> Result<()> {
    let names: Vec<&str> = ds.labels.class_names.iter().map(String::as_str).collect();
    if names != HAM_CLASSES {
        return Err(Error::Config(format!("export needs the seven diagnostic classes, got {names:?}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("metadata.csv");
    let mut w = csv::Writer::from_path(&meta_path).map_err(|e| Error::Ingestion(format!("{}: {e}", meta_path.display())))?;
    let csv_err = |e: csv::Error| Error::Ingestion(format!("{}: {e}", meta_path.display()));
    w.write_record(["image_id", "dx", "age", "sex", "localization"]).map_err(csv_err)?;

    let [_, h, wd] = ds.image_shape();
    let classes = ds.class_indices();
    for row in 0..ds.len() {
        let (image_id, age, sex, site) = if let Some(pre) = &ds.preprocessing {
            let f = ds.tabular.features.row(row);
            let age = if f[1] == 1.0 {
                String::new()
            } else {
                format!("{}", (f[0] * pre.age_std + pre.age_mean).round())
            };
            let pick = |levels: &[String], offset: usize| {
                levels
                    .iter()
                    .enumerate()
                    .find(|(j, _)| f[offset + j] == 1.0)
                    .map_or_else(|| "unknown".to_string(), |(_, s)| s.clone())
            };
            (
                pre.image_ids[row].clone(),
                age,
                pick(&pre.sex_levels, 2),
                pick(&pre.localization_levels, 2 + pre.sex_levels.len()),
            )
        } else if let Some(lat) = &ds.latents {
            let c = lat.cluster[row];
            (
                format!("SYN_{:06}", ds.labels.ids[row]),
                format!("{}", 20 + 5 * c),
                ["male", "female"][c % 2].to_string(),
                SITES[c % SITES.len()].to_string(),
            )
        } else {
            return Err(Error::Config("dataset has neither metadata statistics nor generator state".into()));
        };
        w.write_record([image_id.as_str(), HAM_CLASSES[classes[row]], &age, &sex, &site])
            .map_err(csv_err)?;

        let px = ds.image.images.select_rows(&[row]);
        let mut img = image::RgbImage::new(wd as u32, h as u32);
        for y in 0..h {
            for x in 0..wd {
                let at = |ch: usize| (px.data()[(ch * h + y) * wd + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(x as u32, y as u32, image::Rgb([at(0), at(1), at(2)]));
            }
        }
        let path = dir.join(format!("{image_id}.png"));
        img.save(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))
}

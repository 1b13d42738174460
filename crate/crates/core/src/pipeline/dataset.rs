//! On-disk example sets: `examples.ndjson` with one record per line and `images.bin`
//! holding each distinct raster once as raw `[channel][row][col]` bytes.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::extract::Example;
use crate::error::{Error, Result};
use crate::geometry::RasterSpec;
use crate::intent::{CandidateSet, IntentExample, IntentLabel};
use crate::raster::SemanticImage;
use crate::traj::{State, TrajExample};

pub const EXAMPLES_FILE: &str = "examples.ndjson";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    scene: String,
    agent: String,
    frame: usize,
    raster: RasterSpec,
    image_frames: Vec<usize>,
    /// Index of each history image in the blob, in units of one image.
    images: Vec<usize>,
    history: Vec<State>,
    future: Vec<State>,
    intent: [f64; 2],
    candidates: CandidateSet,
    label: IntentLabel,
}

/// Writes `examples` into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, examples: &[Example]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = BufWriter::new(File::create(dir.join(EXAMPLES_FILE))?);
    let mut blob = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
    let mut index: HashMap<(&str, &str, usize), usize> = HashMap::new();
    let mut spec: Option<RasterSpec> = None;
    for e in examples {
        let s = *e.intent.image.spec();
        if *spec.get_or_insert(s) != s {
            return Err(Error::InvalidInput("all examples of a dataset must share one raster".into()));
        }
        if e.image_frames.len() != e.traj.images.len() {
            return Err(Error::InvalidInput("image_frames and images differ in length".into()));
        }
        let mut ids = Vec::with_capacity(e.traj.images.len());
        for (img, &f) in e.traj.images.iter().zip(&e.image_frames) {
            let next = index.len();
            let id = *index.entry((&e.scene, &e.agent, f)).or_insert(next);
            if id == next {
                blob.write_all(img.raw())?;
            }
            ids.push(id);
        }
        let rec = Record {
            scene: e.scene.clone(),
            agent: e.agent.clone(),
            frame: e.frame,
            raster: s,
            image_frames: e.image_frames.clone(),
            images: ids,
            history: e.traj.history.clone(),
            future: e.traj.future.clone(),
            intent: e.traj.intent,
            candidates: e.intent.candidates.clone(),
            label: e.intent.label,
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.write_all(b"\n")?;
    }
    lines.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Example>> {
    let blob = fs::read(dir.join(IMAGES_FILE))?;
    let reader = BufReader::new(File::open(dir.join(EXAMPLES_FILE))?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let n = rec.raster.n();
        let size = 3 * n * n;
        let images = rec
            .images
            .iter()
            .map(|&id| {
                let bytes = blob.get(id * size..(id + 1) * size).ok_or_else(|| Error::InvalidInput(format!("line {}: image {id} beyond the blob", ln + 1)))?;
                SemanticImage::from_raw(rec.raster, bytes.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let current = images.last().cloned().ok_or_else(|| Error::InvalidInput(format!("line {}: no history images", ln + 1)))?;
        out.push(Example {
            scene: rec.scene,
            agent: rec.agent,
            frame: rec.frame,
            image_frames: rec.image_frames,
            intent: IntentExample::new(current, rec.candidates, rec.label)?,
            traj: TrajExample { history: rec.history, images, intent: rec.intent, future: rec.future },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{extract_examples, generate_synthetic, ExtractionConfig, SyntheticSpec};

    #[test]
    fn round_trip_is_exact() {
        let (scene, map) = generate_synthetic(&SyntheticSpec { n_agents: 4, seed: 2, ..Default::default() }).unwrap();
        let cfg = ExtractionConfig { raster: RasterSpec::new(10.0, 0.5).unwrap(), anchor_stride: 50, ..Default::default() };
        let (ex, _) = extract_examples(&scene, &map, &cfg).unwrap();
        assert!(!ex.is_empty());
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ex).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ex);
        // Shared history images are stored once.
        let blob = fs::metadata(dir.path().join(IMAGES_FILE)).unwrap().len() as usize;
        assert!(blob < ex.len() * 10 * 3 * 40 * 40);
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let (scene, map) = generate_synthetic(&SyntheticSpec { n_agents: 2, seed: 1, ..Default::default() }).unwrap();
        let cfg = ExtractionConfig { raster: RasterSpec::new(10.0, 0.5).unwrap(), anchor_stride: 100, ..Default::default() };
        let (ex, _) = extract_examples(&scene, &map, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ex).unwrap();
        fs::write(dir.path().join(IMAGES_FILE), [0u8; 10]).unwrap();
        assert!(ex.is_empty() || load_dataset(dir.path()).is_err());
    }
}

//! Labeled image datasets, on-disk formats and stratified splitting.

pub mod toy;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
}

impl LabeledSample {
    /// One-hot view of the label over `class_count` classes.
    pub fn one_hot(&self, class_count: usize) -> Vec<f64> {
        let mut y = vec![0.0; class_count];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.label >= class_count) {
            return Err(Error::Invalid(format!(
                "sample {i} has label {} but the dataset has {class_count} classes",
                s.label
            )));
        }
        Ok(Dataset { samples, class_count })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &LabeledSample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Image dimensions shared by every sample, if they agree.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        let first = &self.samples[0].image;
        let dims = (first.width(), first.height());
        self.samples
            .iter()
            .all(|s| (s.image.width(), s.image.height()) == dims)
            .then_some(dims)
    }

    /// A new dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            indices.iter().map(|&i| self.samples[i].clone()).collect(),
            self.class_count,
        )
    }
}

/// Per-class target counts, rounded half up per class and then corrected
/// toward `total` by adjusting the largest classes first.
fn stratified_targets(class_sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let mut targets: Vec<usize> = class_sizes
        .iter()
        .map(|&n| ((fraction * n as f64 + 0.5).floor() as usize).min(n))
        .collect();
    let mut by_size: Vec<usize> = (0..class_sizes.len()).collect();
    by_size.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));

    let mut assigned: usize = targets.iter().sum();
    while assigned < total {
        let before = assigned;
        for &c in &by_size {
            if assigned < total && targets[c] < class_sizes[c] {
                targets[c] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > total {
        let before = assigned;
        for &c in &by_size {
            if assigned > total && targets[c] > 0 {
                targets[c] -= 1;
                assigned -= 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    targets
}

fn stratified_take<R: Rng + ?Sized>(
    labels: &[usize],
    class_count: usize,
    fraction: f64,
    total: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let targets = stratified_targets(&sizes, fraction, total);

    let mut chosen = vec![false; labels.len()];
    for (members, &take) in by_class.iter().zip(&targets) {
        for k in index::sample(rng, members.len(), take) {
            chosen[members[k]] = true;
        }
    }
    let (subset, remainder): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| chosen[i]);
    (subset, remainder)
}

/// Splits sample indices into a class-stratified subset holding about
/// `fraction` of each class and the remainder. Both are returned in
/// ascending index order.
pub fn stratified_split_indices<R: Rng + ?Sized>(
    labels: &[usize],
    class_count: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("fraction", format!("{fraction} is outside (0, 1)")));
    }
    let total = (fraction * labels.len() as f64 + 0.5).floor() as usize;
    let (subset, remainder) = stratified_take(labels, class_count, fraction, total, rng);
    if subset.is_empty() {
        return Err(Error::Invalid(format!(
            "fraction {fraction} of {} samples selects nothing",
            labels.len()
        )));
    }
    Ok((subset, remainder))
}

/// Draws exactly `min(size, N)` indices with per-class proportions preserved.
pub fn stratified_sample_indices<R: Rng + ?Sized>(
    labels: &[usize],
    class_count: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::Invalid("stratified sample size must be positive".into()));
    }
    if size >= labels.len() {
        return Ok((0..labels.len()).collect());
    }
    let fraction = size as f64 / labels.len() as f64;
    Ok(stratified_take(labels, class_count, fraction, size, rng).0)
}

pub fn stratified_split<R: Rng + ?Sized>(ds: &Dataset, fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    let (subset, remainder) = stratified_split_indices(&ds.labels(), ds.class_count(), fraction, rng)?;
    if remainder.is_empty() {
        return Err(Error::Invalid(format!("fraction {fraction} leaves an empty remainder")));
    }
    Ok((ds.subset(&subset)?, ds.subset(&remainder)?))
}

/// One row of a PNG manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Reads a `path,label` CSV. A header row is optional. Paths are relative to
/// the manifest's directory unless absolute.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::load(manifest_path, format!("row {row}: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::load(
                manifest_path,
                format!("row {row}: expected `path,label`, got {} fields", record.len()),
            ));
        }
        let label_text = &record[1];
        let label = match label_text.parse::<i64>() {
            Ok(l) if l >= 0 => l as usize,
            Ok(l) => {
                return Err(Error::load(manifest_path, format!("row {row}: negative label {l}")));
            }
            Err(_) if row == 1 => continue,
            Err(_) => {
                return Err(Error::load(
                    manifest_path,
                    format!("row {row}: label `{label_text}` is not an integer"),
                ));
            }
        };
        entries.push(ManifestEntry {
            path: base.join(&record[0]),
            label,
        });
    }
    Ok(entries)
}

/// Loads every image listed in a manifest. The class count is the largest
/// label plus one.
pub fn load_png_manifest(manifest_path: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(Error::load(manifest_path, "manifest lists no samples"));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        if !entry.path.is_file() {
            return Err(Error::load(
                manifest_path,
                format!("entry {}: missing file {}", i + 1, entry.path.display()),
            ));
        }
        let image = Image::load_png(&entry.path)
            .map_err(|e| Error::load(manifest_path, format!("entry {}: {}: {e}", i + 1, entry.path.display())))?;
        samples.push(LabeledSample {
            image,
            label: entry.label,
        });
    }
    let class_count = entries.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Dataset::new(samples, class_count)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(["path", "label"]).map_err(|e| csv_error(path, e))?;
    for entry in entries {
        writer
            .write_record([entry.path.to_string_lossy().as_ref(), &entry.label.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::load(path, format!("{other:?}")),
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decodes one CIFAR-10 binary batch held in memory.
pub fn decode_cifar_batch(path: &Path, bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut offset = 0;
    while offset < bytes.len() {
        let record = bytes.get(offset..offset + CIFAR_RECORD_BYTES).ok_or_else(|| {
            Error::load(
                path,
                format!(
                    "truncated record at byte offset {offset}: {} of {CIFAR_RECORD_BYTES} bytes",
                    bytes.len() - offset
                ),
            )
        })?;
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::load(
                path,
                format!("label {label} at byte offset {offset} is not below 10"),
            ));
        }
        let pixels = &record[1..];
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            data.extend_from_slice(&[pixels[p], pixels[plane + p], pixels[2 * plane + p]]);
        }
        samples.push(LabeledSample {
            image: Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?,
            label,
        });
        offset += CIFAR_RECORD_BYTES;
    }
    Ok(samples)
}

/// Loads a CIFAR-10 binary batch file, or every `*.bin` file in a directory
/// in lexicographic order.
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut samples = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        samples.extend(decode_cifar_batch(file, &bytes)?);
    }
    if samples.is_empty() {
        return Err(Error::load(path, "no CIFAR records found"));
    }
    Dataset::new(samples, CIFAR_CLASSES)
}

/// Encodes samples in the CIFAR-10 binary layout. Every image must be 32x32
/// and every label below 10.
pub fn encode_cifar_batch(samples: &[LabeledSample]) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(samples.len() * CIFAR_RECORD_BYTES);
    for (i, s) in samples.iter().enumerate() {
        if (s.image.width(), s.image.height()) != (CIFAR_SIDE, CIFAR_SIDE) || s.label >= CIFAR_CLASSES {
            return Err(Error::Invalid(format!("sample {i} does not fit the CIFAR-10 layout")));
        }
        out.push(s.label as u8);
        for c in 0..3 {
            out.extend((0..plane).map(|p| s.image.data()[3 * p + c]));
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let bytes = encode_cifar_batch(samples)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

//! Per-word teacher saliency maps and the synthetic color-grid dataset.
//!
//! Stage one of the pipeline: every sample gets a set of word-keyed 32x32
//! maps that stand in for a frozen text-to-image model's cross-attention.
//! Here they are produced by a deterministic Gaussian generator over a
//! colored grid scene; externally extracted maps can be dropped in through
//! the same file format (see [`save_teacher_maps`] / [`load_teacher_maps`]).
//!
//! Maps are probability distributions: non-negative, summing to 1. The
//! generator is deliberately low-entropy so the teacher is more concentrated
//! than an untrained student — the premise the alignment loss builds on.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::vlm::{SamplePair, Vocab};

/// Side length of the standard saliency raster.
pub const MAP_SIDE: usize = 32;
/// Cell count of the standard raster.
pub const MAP_CELLS: usize = MAP_SIDE * MAP_SIDE;

/// Width of the Gaussian teacher peak, in raster pixels.
pub const DEFAULT_SIGMA: f64 = 1.0;

const LAVT_MAGIC: [u8; 4] = *b"LAVT";
const LAVT_VERSION: u32 = 1;
const SUM_TOL: f64 = 1e-6;

/// A 32x32 non-negative distribution over image space for one word.
///
/// Stored as `f32` so disk round-trips are bit-exact; all downstream math
/// widens to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    word: String,
    grid: Vec<f32>,
}

impl SaliencyMap {
    /// Validates shape, finiteness, non-negativity, and unit mass.
    pub fn new(word: impl Into<String>, grid: Vec<f32>) -> Result<Self> {
        let word = word.into();
        if grid.len() != MAP_CELLS {
            return Err(Error::Invalid {
                op: "SaliencyMap::new",
                detail: format!("grid has {} cells, expected {}", grid.len(), MAP_CELLS),
            });
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInFile { what: format!("map for word {word:?}") });
        }
        if grid.iter().any(|v| *v < 0.0) {
            return Err(Error::Invalid {
                op: "SaliencyMap::new",
                detail: format!("negative entry in map for word {word:?}"),
            });
        }
        let sum: f64 = grid.iter().map(|v| *v as f64).sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Unnormalized { word, sum });
        }
        Ok(SaliencyMap { word, grid })
    }

    /// Cast an `f64` distribution down to the storage format.
    pub fn from_f64(word: impl Into<String>, values: &[f64]) -> Result<Self> {
        SaliencyMap::new(word, values.iter().map(|v| *v as f32).collect())
    }

    pub fn word(&self) -> &str {
        &self.word
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    pub fn grid_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|v| *v as f64).collect()
    }

    /// The map as a [32, 32] tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![MAP_SIDE, MAP_SIDE], self.grid_f64()).unwrap()
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().map(|v| *v as f64).sum()
    }
}

/// All teacher maps for one sample, keyed by word.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMapSet {
    pub sample_id: String,
    maps: Vec<SaliencyMap>,
}

impl TeacherMapSet {
    pub fn new(sample_id: impl Into<String>, maps: Vec<SaliencyMap>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &maps {
            if !seen.insert(m.word().to_string()) {
                return Err(Error::Invalid {
                    op: "TeacherMapSet::new",
                    detail: format!("duplicate word {:?}", m.word()),
                });
            }
        }
        Ok(TeacherMapSet { sample_id: sample_id.into(), maps })
    }

    pub fn maps(&self) -> &[SaliencyMap] {
        &self.maps
    }

    pub fn get(&self, word: &str) -> Option<&SaliencyMap> {
        self.maps.iter().find(|m| m.word() == word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.maps.iter().map(|m| m.word())
    }
}

/// A colored grid scene: which cells carry which color words.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    /// (cell index, color word); indices must be unique and in range.
    pub cells: Vec<(usize, String)>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::BadScene("grid has zero extent".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::BadScene("scene has no cells".into()));
        }
        let mut seen = HashSet::new();
        for (idx, _) in &self.cells {
            if *idx >= self.rows * self.cols {
                return Err(Error::BadScene(format!("cell index {idx} out of range")));
            }
            if !seen.insert(*idx) {
                return Err(Error::BadScene(format!("duplicate cell index {idx}")));
            }
        }
        Ok(())
    }
}

/// Generate one isotropic-Gaussian map per scene cell, each centered on the
/// cell's center in the 32x32 raster and normalized to unit mass.
/// Deterministic in its inputs.
pub fn synth_teacher(scene: &SceneSpec, sigma: f64) -> Result<TeacherMapSet> {
    synth_teacher_with_id(scene, sigma, "scene")
}

pub fn synth_teacher_with_id(scene: &SceneSpec, sigma: f64, sample_id: &str) -> Result<TeacherMapSet> {
    scene.validate()?;
    if sigma <= 0.0 {
        return Err(Error::Invalid { op: "synth_teacher", detail: format!("sigma {sigma} must be > 0") });
    }
    let mut maps = Vec::with_capacity(scene.cells.len());
    for (idx, word) in &scene.cells {
        let (r, c) = (idx / scene.cols, idx % scene.cols);
        let grid = gaussian_at_cell(r, c, scene.rows, scene.cols, sigma);
        maps.push(SaliencyMap::from_f64(word.clone(), &grid)?);
    }
    TeacherMapSet::new(sample_id, maps)
}

/// Center of a grid cell in raster pixel coordinates.
pub fn cell_center(r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
    let cy = (r as f64 + 0.5) * MAP_SIDE as f64 / rows as f64 - 0.5;
    let cx = (c as f64 + 0.5) * MAP_SIDE as f64 / cols as f64 - 0.5;
    (cy, cx)
}

fn gaussian_at_cell(r: usize, c: usize, rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let (cy, cx) = cell_center(r, c, rows, cols);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut grid = vec![0.0; MAP_CELLS];
    let mut sum = 0.0;
    for y in 0..MAP_SIDE {
        for x in 0..MAP_SIDE {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let v = (-(dy * dy + dx * dx) * inv).exp();
            grid[y * MAP_SIDE + x] = v;
            sum += v;
        }
    }
    for v in grid.iter_mut() {
        *v /= sum;
    }
    grid
}

// ── LAVT file format ─────────────────────────────────────────────────
//
// magic "LAVT" | version u32 | sample-id string | map count u32
// then per map: word string | 1024 little-endian f32, row-major.
// Strings are u32-length-prefixed UTF-8.

pub fn save_teacher_maps(set: &TeacherMapSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&LAVT_MAGIC);
    buf.extend_from_slice(&LAVT_VERSION.to_le_bytes());
    write_string(&mut buf, &set.sample_id);
    buf.extend_from_slice(&(set.maps.len() as u32).to_le_bytes());
    for m in &set.maps {
        write_string(&mut buf, m.word());
        for v in m.grid() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_teacher_maps(path: &Path) -> Result<TeacherMapSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take::<4>("magic")?;
    if magic != LAVT_MAGIC {
        return Err(Error::BadMagic { expected: LAVT_MAGIC, found: magic });
    }
    let version = cur.u32("version")?;
    if version != LAVT_VERSION {
        return Err(Error::Invalid { op: "load_teacher_maps", detail: format!("unsupported version {version}") });
    }
    let sample_id = cur.string("sample id")?;
    let count = cur.u32("map count")? as usize;
    let mut maps = Vec::with_capacity(count);
    for _ in 0..count {
        let word = cur.string("word")?;
        let mut grid = Vec::with_capacity(MAP_CELLS);
        for _ in 0..MAP_CELLS {
            let v = f32::from_le_bytes(cur.take::<4>("map values")?);
            if !v.is_finite() {
                return Err(Error::NonFiniteInFile { what: format!("map for word {word:?}") });
            }
            grid.push(v);
        }
        maps.push(SaliencyMap::new(word, grid)?);
    }
    TeacherMapSet::new(sample_id, maps)
}

fn write_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        if self.pos + N > self.bytes.len() {
            return Err(Error::Truncated { what });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>(what)?))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if self.pos + len > self.bytes.len() {
            return Err(Error::Truncated { what });
        }
        let s = String::from_utf8(self.bytes[self.pos..self.pos + len].to_vec())
            .map_err(|_| Error::Invalid { op: "read_string", detail: format!("{what}: invalid UTF-8") })?;
        self.pos += len;
        Ok(s)
    }
}

// ── Color-grid dataset ───────────────────────────────────────────────

/// The color vocabulary of the synthetic task.
pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"];

/// Question scaffold words.
pub const QUESTION_WORDS: [&str; 2] = ["color", "at"];

/// A (queried cell, color) pair — the unit the held-out split is keyed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComboKey {
    pub cell: usize,
    pub color: usize,
}

/// Build the task vocabulary for a grid: colors, row/col words, scaffold.
pub fn build_vocab(rows: usize, cols: usize) -> Vocab {
    let mut words: Vec<String> = COLOR_NAMES.iter().map(|s| s.to_string()).collect();
    for r in 0..rows {
        words.push(format!("r{r}"));
    }
    for c in 0..cols {
        words.push(format!("c{c}"));
    }
    for w in QUESTION_WORDS {
        words.push(w.to_string());
    }
    Vocab::new(words)
}

/// Deterministic train/test partition of all (cell, color) combinations.
pub fn split_combo_keys(rows: usize, cols: usize, test_frac: f64, seed: u64) -> (Vec<ComboKey>, Vec<ComboKey>) {
    let mut keys: Vec<ComboKey> = (0..rows * cols)
        .flat_map(|cell| (0..COLOR_NAMES.len()).map(move |color| ComboKey { cell, color }))
        .collect();
    let mut rng = stream(seed, Stream::Dataset);
    keys.shuffle(&mut rng);
    let n_test = ((keys.len() as f64) * test_frac).round() as usize;
    let test = keys.split_off(keys.len() - n_test);
    (keys, test)
}

/// Generate `n_samples` question/answer pairs with matching teacher maps.
///
/// Each sample colors the whole grid, asks for the color at one named cell,
/// and labels the answer with that cell's color word. The teacher map for the
/// label word peaks at the queried cell. Deterministic under `seed`.
pub fn make_dataset(
    n_samples: usize,
    rows: usize,
    cols: usize,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<(SamplePair, TeacherMapSet)>> {
    let all: Vec<ComboKey> = (0..rows * cols)
        .flat_map(|cell| (0..COLOR_NAMES.len()).map(move |color| ComboKey { cell, color }))
        .collect();
    make_dataset_from_combos(n_samples, rows, cols, vocab, seed, &all, DEFAULT_SIGMA, "s")
}

/// Like [`make_dataset`] but restricted to the given combination keys;
/// used to generate disjoint train and held-out splits.
#[allow(clippy::too_many_arguments)]
pub fn make_dataset_from_combos(
    n_samples: usize,
    rows: usize,
    cols: usize,
    vocab: &Vocab,
    seed: u64,
    combos: &[ComboKey],
    sigma: f64,
    id_prefix: &str,
) -> Result<Vec<(SamplePair, TeacherMapSet)>> {
    let needed = COLOR_NAMES.len() + rows + cols + QUESTION_WORDS.len();
    if vocab.len() < needed {
        return Err(Error::VocabTooSmall { needed, have: vocab.len() });
    }
    for w in COLOR_NAMES.iter().copied().chain(QUESTION_WORDS) {
        if vocab.id(w).is_none() {
            return Err(Error::VocabTooSmall { needed, have: vocab.len() });
        }
    }
    if combos.is_empty() {
        return Err(Error::BadScene("no combination keys to sample from".into()));
    }

    let mut rng = stream(seed, Stream::Dataset);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let key = combos[rng.random_range(0..combos.len())];
        let (qr, qc) = (key.cell / cols, key.cell % cols);

        // Color every cell; the queried cell gets the combo color.
        let mut cell_colors: Vec<usize> =
            (0..rows * cols).map(|_| rng.random_range(0..COLOR_NAMES.len())).collect();
        cell_colors[key.cell] = key.color;

        let sample_id = format!("{id_prefix}{i:05}");
        let label_word = COLOR_NAMES[key.color];
        let question: Vec<usize> = [
            "color".to_string(),
            "at".to_string(),
            format!("r{qr}"),
            format!("c{qc}"),
        ]
        .iter()
        .map(|w| vocab.id(w).expect("vocab checked above"))
        .collect();
        let label = vec![vocab.id(label_word).expect("vocab checked above")];

        let image = one_hot_image(&cell_colors);
        let pair = SamplePair {
            sample_id: sample_id.clone(),
            image,
            question,
            label,
            cell_colors,
            queried_cell: key.cell,
        };

        let scene = SceneSpec { rows, cols, cells: vec![(key.cell, label_word.to_string())] };
        let maps = synth_teacher_with_id(&scene, sigma, &sample_id)?;
        out.push((pair, maps));
    }
    Ok(out)
}

/// One-hot color features per patch: [n_patch, n_colors].
pub fn one_hot_image(cell_colors: &[usize]) -> Tensor {
    let n = cell_colors.len();
    let d = COLOR_NAMES.len();
    let mut t = Tensor::zeros(vec![n, d]);
    for (i, &c) in cell_colors.iter().enumerate() {
        t.data_mut()[i * d + c] = 1.0;
    }
    t
}

// ── Dataset files ────────────────────────────────────────────────────
//
// Plain text, whitespace-separated, one record per line:
//   colorgrid 1
//   grid R C
//   colors w...
//   sample <id> <queried-cell> <color-ids,comma> <n_q> <q words...> <label words...>

pub fn save_samples(samples: &[SamplePair], rows: usize, cols: usize, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("colorgrid 1\n");
    s.push_str(&format!("grid {rows} {cols}\n"));
    s.push_str("colors");
    for c in COLOR_NAMES {
        s.push(' ');
        s.push_str(c);
    }
    s.push('\n');
    for p in samples {
        let colors: Vec<String> = p.cell_colors.iter().map(|c| c.to_string()).collect();
        let q: Vec<&str> = p.question.iter().map(|&t| vocab.word(t)).collect();
        let l: Vec<&str> = p.label.iter().map(|&t| vocab.word(t)).collect();
        s.push_str(&format!(
            "sample {} {} {} {} {} {}\n",
            p.sample_id,
            p.queried_cell,
            colors.join(","),
            q.len(),
            q.join(" "),
            l.join(" ")
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_samples(path: &Path, vocab: &Vocab) -> Result<(Vec<SamplePair>, usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Truncated { what: "dataset header" })?;
    if header.trim() != "colorgrid 1" {
        return Err(Error::Config(format!("unexpected dataset header {header:?}")));
    }
    let grid_line = lines.next().ok_or(Error::Truncated { what: "grid line" })?;
    let mut it = grid_line.split_whitespace();
    if it.next() != Some("grid") {
        return Err(Error::Config("expected grid line".into()));
    }
    let rows: usize = parse(it.next(), "grid rows")?;
    let cols: usize = parse(it.next(), "grid cols")?;
    let _colors = lines.next().ok_or(Error::Truncated { what: "colors line" })?;

    let mut samples = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        if it.next() != Some("sample") {
            return Err(Error::Config(format!("unexpected line {line:?}")));
        }
        let sample_id = it.next().ok_or(Error::Truncated { what: "sample id" })?.to_string();
        let queried_cell: usize = parse(it.next(), "queried cell")?;
        let colors_field = it.next().ok_or(Error::Truncated { what: "cell colors" })?;
        let cell_colors: Vec<usize> = colors_field
            .split(',')
            .map(|c| c.parse::<usize>().map_err(|_| Error::Config(format!("bad color id {c:?}"))))
            .collect::<Result<_>>()?;
        let n_q: usize = parse(it.next(), "question length")?;
        let mut question = Vec::with_capacity(n_q);
        for _ in 0..n_q {
            let w = it.next().ok_or(Error::Truncated { what: "question word" })?;
            question.push(vocab.id(w).ok_or_else(|| Error::Config(format!("word {w:?} not in vocab")))?);
        }
        let mut label = Vec::new();
        for w in it {
            label.push(vocab.id(w).ok_or_else(|| Error::Config(format!("word {w:?} not in vocab")))?);
        }
        if label.is_empty() {
            return Err(Error::Config(format!("sample {sample_id} has no label")));
        }
        let image = one_hot_image(&cell_colors);
        samples.push(SamplePair { sample_id, image, question, label, cell_colors, queried_cell });
    }
    Ok((samples, rows, cols))
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    field
        .ok_or(Error::Config(format!("missing {what}")))?
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad {what}")))
}

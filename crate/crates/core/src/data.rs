//! Dataset ingestion: IDX image files, name corpora for character-level
//! language modeling, and deterministic synthetic generators for desk-scale
//! runs without external downloads.

use crate::error::{Error, Result};
use crate::tensor::Rng;
use std::fs;
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const VOCAB: usize = 27; // '.' plus a-z

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Vision samples: (1, 28, 28) images in [0,1] with class labels 0..9.
/// Sample ids are 0..n-1 and stable across runs.
#[derive(Debug, Clone)]
pub struct VisionData {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub split: Split,
}

impl VisionData {
    pub const PIXELS: usize = 28 * 28;

    pub fn image(&self, id: usize) -> &[f32] {
        &self.images[id * Self::PIXELS..(id + 1) * Self::PIXELS]
    }
}

/// Text samples: fixed-length token windows paired with the next token.
/// Targets for position t are window[t+1], with `next` at the last position.
#[derive(Debug, Clone)]
pub struct TextData {
    pub windows: Vec<usize>,
    pub next: Vec<usize>,
    pub context: usize,
    pub n: usize,
    pub split: Split,
}

impl TextData {
    pub fn window(&self, id: usize) -> &[usize] {
        &self.windows[id * self.context..(id + 1) * self.context]
    }

    /// Shifted targets for one window: window[1..] followed by next.
    pub fn targets(&self, id: usize) -> Vec<usize> {
        let w = self.window(id);
        let mut t = w[1..].to_vec();
        t.push(self.next[id]);
        t
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Vision(VisionData),
    Text(TextData),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Vision(v) => v.n,
            Dataset::Text(t) => t.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ── IDX format ──────────────────────────────────────────────────────────

fn read_u32_be(buf: &[u8], off: usize, path: &str) -> Result<u32> {
    if off + 4 > buf.len() {
        return Err(Error::Truncated {
            path: path.to_string(),
            need: off + 4,
            have: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([
        buf[off],
        buf[off + 1],
        buf[off + 2],
        buf[off + 3],
    ]))
}

/// Parses the standard big-endian IDX image/label pair: magic 0x00000803 with
/// dims (n, 28, 28) and unsigned bytes scaled to [0,1]; magic 0x00000801 with
/// n label bytes in 0..=9. Counts must match.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<VisionData> {
    let ibuf = fs::read(images_path)?;
    let ipath = images_path.display().to_string();
    let magic = read_u32_be(&ibuf, 0, &ipath)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: ipath,
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&ibuf, 4, &ipath)? as usize;
    let rows = read_u32_be(&ibuf, 8, &ipath)? as usize;
    let cols = read_u32_be(&ibuf, 12, &ipath)? as usize;
    if rows != 28 || cols != 28 {
        return Err(Error::Invalid {
            what: format!("expected 28x28 images, got {}x{}", rows, cols),
        });
    }
    let need = 16 + n * rows * cols;
    if ibuf.len() < need {
        return Err(Error::Truncated {
            path: ipath,
            need,
            have: ibuf.len(),
        });
    }

    let lbuf = fs::read(labels_path)?;
    let lpath = labels_path.display().to_string();
    let lmagic = read_u32_be(&lbuf, 0, &lpath)?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: lpath,
            expected: LABEL_MAGIC,
            got: lmagic,
        });
    }
    let ln = read_u32_be(&lbuf, 4, &lpath)? as usize;
    if ln != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    if lbuf.len() < 8 + n {
        return Err(Error::Truncated {
            path: lpath,
            need: 8 + n,
            have: lbuf.len(),
        });
    }

    let images: Vec<f32> = ibuf[16..16 + n * rows * cols]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let mut labels = Vec::with_capacity(n);
    for &b in &lbuf[8..8 + n] {
        if b > 9 {
            return Err(Error::Invalid {
                what: format!("label byte {} out of range 0..=9", b),
            });
        }
        labels.push(b as usize);
    }
    Ok(VisionData {
        images,
        labels,
        n,
        split: Split::Train,
    })
}

/// Writes an IDX image/label fixture pair (the inverse of `load_idx_images`).
pub fn write_idx_fixture(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    debug_assert_eq!(pixels.len(), n * 28 * 28);
    let mut ibuf = Vec::with_capacity(16 + pixels.len());
    ibuf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&28u32.to_be_bytes());
    ibuf.extend_from_slice(&28u32.to_be_bytes());
    ibuf.extend_from_slice(pixels);
    fs::write(images_path, ibuf)?;
    let mut lbuf = Vec::with_capacity(8 + n);
    lbuf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    lbuf.extend_from_slice(labels);
    fs::write(labels_path, lbuf)?;
    Ok(())
}

// ── Character-level name corpus ─────────────────────────────────────────

pub fn tokenize_char(c: char) -> Option<usize> {
    match c {
        '.' => Some(0),
        'a'..='z' => Some(c as usize - 'a' as usize + 1),
        _ => None,
    }
}

pub fn detokenize(id: usize) -> char {
    match id {
        0 => '.',
        1..=26 => (b'a' + (id - 1) as u8) as char,
        _ => '?',
    }
}

/// Normalizes a raw line: lowercase, keep only a-z.
pub fn normalize_name(line: &str) -> String {
    line.chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_ascii_lowercase())
        .collect()
}

/// Turns names into (window, next-char) pairs: each name is padded with
/// `context` leading dots and one trailing dot, then slid one step at a time,
/// yielding len+1 pairs per non-empty name.
pub fn names_to_windows(names: &[String], context: usize, split: Split) -> TextData {
    let mut windows = Vec::new();
    let mut next = Vec::new();
    for name in names {
        if name.is_empty() {
            continue;
        }
        let mut seq: Vec<usize> = vec![0; context];
        seq.extend(name.chars().filter_map(tokenize_char));
        seq.push(0);
        for i in 0..seq.len() - context {
            windows.extend_from_slice(&seq[i..i + context]);
            next.push(seq[i + context]);
        }
    }
    let n = next.len();
    TextData {
        windows,
        next,
        context,
        n,
        split,
    }
}

/// Loads a UTF-8 one-name-per-line corpus; characters outside a-z are dropped.
pub fn load_names_corpus(path: &Path, context: usize) -> Result<TextData> {
    let text = fs::read_to_string(path)?;
    let names: Vec<String> = text
        .lines()
        .map(normalize_name)
        .filter(|n| !n.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = names_to_windows(&names, context, Split::Train);
    if data.n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(data)
}

// ── Synthetic generators ────────────────────────────────────────────────

/// First row of the 3-row band that identifies class c in synthetic images.
pub fn class_band(class: usize) -> usize {
    class * 28 / 10
}

/// 10-class 28x28 images: a bright horizontal bar whose row band encodes the
/// class, plus a distractor blob and background noise. `label_noise` is the
/// fraction of samples whose label is re-drawn uniformly over all classes.
pub fn synthetic_vision_with_noise(
    n: usize,
    seed: u64,
    label_noise: f32,
    split: Split,
) -> VisionData {
    let mut rng = Rng::new(seed);
    let mut images = vec![0.0f32; n * VisionData::PIXELS];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.below(10);
        let img = &mut images[i * VisionData::PIXELS..(i + 1) * VisionData::PIXELS];
        for px in img.iter_mut() {
            *px = rng.range_f32(0.0, 0.25);
        }
        // class bar: rows band..band+3, full width
        let band = class_band(class);
        for r in band..band + 3 {
            for c in 0..28 {
                img[r * 28 + c] = rng.range_f32(0.75, 1.0);
            }
        }
        // one dim distractor blob that never outshines the bar
        let by = rng.below(24);
        let bx = rng.below(24);
        for dy in 0..4 {
            for dx in 0..4 {
                let idx = (by + dy) * 28 + bx + dx;
                img[idx] = img[idx].max(rng.range_f32(0.35, 0.6));
            }
        }
        let label = if rng.next_f32() < label_noise {
            rng.below(10)
        } else {
            class
        };
        labels.push(label);
    }
    VisionData {
        images,
        labels,
        n,
        split,
    }
}

/// The generator contract used by experiments: 5% label noise.
pub fn synthetic_vision(n: usize, seed: u64) -> VisionData {
    synthetic_vision_with_noise(n, seed, 0.05, Split::Train)
}

/// Fixed character-transition table for synthetic names. Built once from
/// vowel/consonant rules plus deterministic per-pair jitter; rows are
/// normalized transition probabilities over the 27-token alphabet.
pub fn bigram_table() -> Vec<[f32; VOCAB]> {
    let vowel = |t: usize| matches!(t, 1 | 5 | 9 | 15 | 21); // a e i o u
    let mut jitter = Rng::new(0xB16_9A11);
    let mut table = Vec::with_capacity(VOCAB);
    for from in 0..VOCAB {
        let mut row = [0.0f32; VOCAB];
        for (to, w) in row.iter_mut().enumerate() {
            let base = if from == 0 {
                // start of name: never emit '.' immediately
                if to == 0 {
                    0.0
                } else if vowel(to) {
                    2.0
                } else {
                    3.0
                }
            } else if to == 0 {
                // end of name
                if vowel(from) {
                    1.4
                } else {
                    0.9
                }
            } else if vowel(from) {
                if vowel(to) {
                    0.6
                } else {
                    3.0
                }
            } else if vowel(to) {
                4.0
            } else {
                0.4
            };
            *w = base * jitter.range_f32(0.35, 1.65);
        }
        let total: f32 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= total;
        }
        table.push(row);
    }
    table
}

fn sample_row(row: &[f32; VOCAB], rng: &mut Rng) -> usize {
    let u = rng.next_f32();
    let mut acc = 0.0f32;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    VOCAB - 1
}

/// Samples one name (2..=12 chars) from the fixed 2-gram table.
pub fn sample_name(table: &[[f32; VOCAB]], rng: &mut Rng) -> String {
    loop {
        let mut name = String::new();
        let mut prev = 0usize;
        for _ in 0..12 {
            let tok = sample_row(&table[prev], rng);
            if tok == 0 {
                break;
            }
            name.push(detokenize(tok));
            prev = tok;
        }
        if name.len() >= 2 {
            return name;
        }
    }
}

/// Deterministic synthetic text: names drawn from the embedded 2-gram table,
/// windowed to exactly n (window, next) pairs.
pub fn synthetic_text(n: usize, seed: u64, context: usize, split: Split) -> TextData {
    let table = bigram_table();
    let mut rng = Rng::new(seed);
    let mut names = Vec::new();
    let mut pairs = 0usize;
    while pairs < n {
        let name = sample_name(&table, &mut rng);
        pairs += name.len() + 1;
        names.push(name);
    }
    let mut data = names_to_windows(&names, context, split);
    data.windows.truncate(n * context);
    data.next.truncate(n);
    data.n = n;
    data
}

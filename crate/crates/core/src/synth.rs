//! Procedural shapes corpus.
//!
//! A scene places one to three coloured shapes on a 2x2 grid. Everything
//! else (pixels, caption, hard negatives, probe label) is a deterministic
//! function of the scene, and all scene logic is integer-only.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::model::Image;
use crate::rng::{derive_seed, seeded, splitmix64, Stream};
use crate::vocab::{pad_to, TokenId, Vocabulary};
#[cfg(not(feature = "std"))]
use num_traits::Float;

pub const IMAGE_SIZE: usize = 32;
pub const CAPTION_SLOTS: usize = 16;
pub const GRID: usize = 2;
pub const CELLS: usize = GRID * GRID;
pub const NUM_CLASSES: usize = 16;
pub const GRAMMAR_VERSION: u32 = 1;

const CELL_PX: usize = IMAGE_SIZE / GRID;
const BACKGROUND: [u8; 3] = [20, 20, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Membership test in doubled pixel units relative to the cell centre
    /// (`dx`, `dy` are odd integers for pixel centres).
    fn covers(self, dx: i32, dy: i32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= 144,
            ShapeKind::Square => dx.abs() <= 11 && dy.abs() <= 11,
            ShapeKind::Triangle => (-12..=12).contains(&dy) && 2 * dx.abs() <= dy + 12,
            ShapeKind::Cross => (dx.abs() <= 3 && dy.abs() <= 12) || (dy.abs() <= 3 && dx.abs() <= 12),
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 30],
            Color::Blue => [40, 60, 230],
            Color::Yellow => [230, 220, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    /// Row-major index into the 2x2 layout grid.
    pub cell: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    /// Sorted by cell; cells are distinct.
    pub objects: Vec<Object>,
    pub seed: u64,
}

impl Scene {
    /// Scene drawn from the generator seeded with `seed`.
    pub fn generate(seed: u64) -> Scene {
        gen_scene(&mut seeded(seed), seed)
    }

    pub fn is_valid(&self) -> bool {
        (1..=3).contains(&self.objects.len())
            && self.objects.windows(2).all(|w| w[0].cell < w[1].cell)
            && self.objects.iter().all(|o| (o.cell as usize) < CELLS)
    }

    /// Same objects, ignoring the seed.
    pub fn same_layout(&self, other: &Scene) -> bool {
        self.objects == other.objects
    }
}

/// Uniform object count in `1..=3`, uniform distinct cells, uniform
/// attributes.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, seed: u64) -> Scene {
    let count = rng.gen_range(1u32..=3) as usize;
    let mut cells: Vec<u8> = (0..CELLS as u8).collect();
    // Partial Fisher-Yates with u32 draws, identical on every platform.
    for i in 0..count {
        let j = i + rng.gen_range(0u32..(CELLS - i) as u32) as usize;
        cells.swap(i, j);
    }
    let mut chosen = cells[..count].to_vec();
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|cell| Object {
            shape: ShapeKind::ALL[rng.gen_range(0u32..4) as usize],
            color: Color::ALL[rng.gen_range(0u32..4) as usize],
            cell,
        })
        .collect();
    Scene { objects, seed }
}

/// `IMAGE_SIZE x IMAGE_SIZE x 3` bytes, row-major, channels last.
pub fn render(scene: &Scene) -> Vec<u8> {
    let mut px = vec![0u8; IMAGE_SIZE * IMAGE_SIZE * 3];
    for chunk in px.chunks_mut(3) {
        chunk.copy_from_slice(&BACKGROUND);
    }
    for obj in &scene.objects {
        let (row, col) = (obj.cell as usize / GRID, obj.cell as usize % GRID);
        let (cx, cy) = ((2 * (col * CELL_PX) + CELL_PX) as i32, (2 * (row * CELL_PX) + CELL_PX) as i32);
        for y in row * CELL_PX..(row + 1) * CELL_PX {
            for x in col * CELL_PX..(col + 1) * CELL_PX {
                let (dx, dy) = ((2 * x + 1) as i32 - cx, (2 * y + 1) as i32 - cy);
                if obj.shape.covers(dx, dy) {
                    let i = (y * IMAGE_SIZE + x) * 3;
                    px[i..i + 3].copy_from_slice(&obj.color.rgb());
                }
            }
        }
    }
    px
}

pub fn render_image(scene: &Scene) -> Image {
    Image::from_bytes(IMAGE_SIZE, IMAGE_SIZE, &render(scene)).expect("renderer emits a full frame")
}

const FUNCTION_WORDS: [&str; 6] = ["a", ".", "and", "above", "beside", "near"];

/// Word-level vocabulary of the caption grammar.
pub fn vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    Vocabulary::new(&words).expect("grammar words are distinct")
}

/// Relation word describing the first object relative to the second.
fn relation(a: u8, b: u8) -> &'static str {
    let (ra, ca) = (a as usize / GRID, a as usize % GRID);
    let (rb, cb) = (b as usize / GRID, b as usize % GRID);
    if ra == rb {
        "beside"
    } else if ca == cb {
        "above"
    } else {
        "near"
    }
}

fn caption_words(scene: &Scene) -> Vec<&'static str> {
    let o = &scene.objects;
    let mut w = vec!["a", o[0].color.word(), o[0].shape.word()];
    if o.len() >= 2 {
        w.extend([relation(o[0].cell, o[1].cell), "a", o[1].color.word(), o[1].shape.word()]);
    }
    if o.len() == 3 {
        w.extend(["and", "a", o[2].color.word(), o[2].shape.word()]);
    }
    w.push(".");
    w
}

fn tokenize(words: &[&str], vocab: &Vocabulary) -> Vec<TokenId> {
    let ids = words
        .iter()
        .map(|w| vocab.id(w).expect("grammar word missing from vocabulary"))
        .collect();
    pad_to(ids, CAPTION_SLOTS)
}

/// Caption tokens, padded to [`CAPTION_SLOTS`]:
/// `a <color> <shape> [<rel> a <color> <shape> [and a <color> <shape>]] .`
pub fn caption_of(scene: &Scene, vocab: &Vocabulary) -> Vec<TokenId> {
    tokenize(&caption_words(scene), vocab)
}

/// Inverse of the grammar: the ordered `(color, shape)` list and relation
/// word, or `None` if the tokens are not a well-formed caption.
pub fn parse_caption(tokens: &[TokenId], vocab: &Vocabulary) -> Option<Vec<(Color, ShapeKind)>> {
    let words: Vec<&str> = tokens
        .iter()
        .take_while(|&&t| t != vocab.pad_id())
        .map(|&t| vocab.word(t))
        .collect::<Option<_>>()?;
    let attr = |c: &str, s: &str| {
        let color = Color::ALL.into_iter().find(|x| x.word() == c)?;
        let shape = ShapeKind::ALL.into_iter().find(|x| x.word() == s)?;
        Some((color, shape))
    };
    let is_rel = |w: &str| matches!(w, "above" | "beside" | "near");
    match words.as_slice() {
        ["a", c, s, "."] => Some(vec![attr(c, s)?]),
        ["a", c1, s1, r, "a", c2, s2, "."] if is_rel(r) => Some(vec![attr(c1, s1)?, attr(c2, s2)?]),
        ["a", c1, s1, r, "a", c2, s2, "and", "a", c3, s3, "."] if is_rel(r) => {
            Some(vec![attr(c1, s1)?, attr(c2, s2)?, attr(c3, s3)?])
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NegativeKind {
    Swap,
    Replace,
    Shuffle,
}

impl NegativeKind {
    pub const ALL: [NegativeKind; 3] = [NegativeKind::Swap, NegativeKind::Replace, NegativeKind::Shuffle];

    pub fn name(self) -> &'static str {
        match self {
            NegativeKind::Swap => "swap",
            NegativeKind::Replace => "replace",
            NegativeKind::Shuffle => "shuffle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

const NEGATIVE_SALT: u64 = 0x6E65_6761_7469_7665;

/// Hard negatives of the scene's caption.
///
/// - swap: exchange the colour words of the first pair of objects whose
///   colours differ (shape words if all colours agree); absent for one
///   object or identical objects
/// - replace: one colour or shape word changed to another value
/// - shuffle: a non-identity reordering of the caption words
pub fn negatives(scene: &Scene, vocab: &Vocabulary) -> BTreeMap<NegativeKind, Vec<TokenId>> {
    let mut rng = seeded(splitmix64(scene.seed ^ NEGATIVE_SALT));
    let original = caption_of(scene, vocab);
    let mut out = BTreeMap::new();

    let objs = &scene.objects;
    let pairs = (0..objs.len()).flat_map(|i| (i + 1..objs.len()).map(move |j| (i, j)));
    let color_pair = pairs.clone().find(|&(i, j)| objs[i].color != objs[j].color);
    let swapped = match color_pair {
        Some((i, j)) => {
            let mut s = scene.clone();
            s.objects[i].color = objs[j].color;
            s.objects[j].color = objs[i].color;
            Some(s)
        }
        None => pairs.clone().find(|&(i, j)| objs[i].shape != objs[j].shape).map(|(i, j)| {
            let mut s = scene.clone();
            s.objects[i].shape = objs[j].shape;
            s.objects[j].shape = objs[i].shape;
            s
        }),
    };
    if let Some(s) = swapped {
        out.insert(NegativeKind::Swap, caption_of(&s, vocab));
    }

    let mut replaced = scene.clone();
    let k = rng.gen_range(0u32..objs.len() as u32) as usize;
    let offset = rng.gen_range(1u32..4) as usize;
    if rng.gen_range(0u32..2) == 0 {
        let c = Color::ALL.iter().position(|&c| c == objs[k].color).unwrap();
        replaced.objects[k].color = Color::ALL[(c + offset) % 4];
    } else {
        let s = ShapeKind::ALL.iter().position(|&s| s == objs[k].shape).unwrap();
        replaced.objects[k].shape = ShapeKind::ALL[(s + offset) % 4];
    }
    out.insert(NegativeKind::Replace, caption_of(&replaced, vocab));

    let mut words = caption_words(scene);
    let base = words.clone();
    loop {
        words.shuffle(&mut rng);
        if words != base {
            break;
        }
    }
    out.insert(NegativeKind::Shuffle, tokenize(&words, vocab));
    debug_assert!(out.values().all(|n| *n != original));
    out
}

/// Class of the first object in row-major cell order: `shape * 4 + color`.
pub fn probe_label(scene: &Scene) -> u32 {
    let o = &scene.objects[0];
    (o.shape as u32) * 4 + o.color as u32
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub seed: u64,
    pub pixels: Vec<u8>,
    pub caption: Vec<TokenId>,
    pub negatives: BTreeMap<NegativeKind, Vec<TokenId>>,
    pub label: u32,
}

impl Record {
    pub fn from_scene(scene: &Scene, vocab: &Vocabulary) -> Record {
        Record {
            seed: scene.seed,
            pixels: render(scene),
            caption: caption_of(scene, vocab),
            negatives: negatives(scene, vocab),
            label: probe_label(scene),
        }
    }

    pub fn image(&self) -> Result<Image> {
        Image::from_bytes(IMAGE_SIZE, IMAGE_SIZE, &self.pixels)
    }
}

/// Records `0..count` of the corpus for `master_seed`; record `i` depends
/// only on `(master_seed, i)`.
pub fn generate_corpus(master_seed: u64, count: usize, vocab: &Vocabulary) -> Vec<Record> {
    (0..count as u64)
        .map(|i| Record::from_scene(&Scene::generate(derive_seed(master_seed, Stream::Data, i)), vocab))
        .collect()
}

/// Deterministic train/test split: a seeded permutation, with the first
/// `train_fraction` of it used for training.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream_rng(seed, Stream::Split, 0);
    for i in (1..n).rev() {
        let j = rng.gen_range(0u32..=i as u32) as usize;
        idx.swap(i, j);
    }
    let cut = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

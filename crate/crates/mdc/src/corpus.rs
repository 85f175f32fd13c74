//! On-disk corpus: `corpus.tsv`, `vocab.txt` and `manifest.json`.
//!
//! `corpus.tsv` has one record per line with seven tab-separated fields:
//! scene seed, probe label, caption ids, swap ids, replace ids, shuffle
//! ids, pixels. Id lists and pixels are space-separated decimal integers;
//! an absent negative is written `-`. Captions keep their padding so every
//! line has the same shape. Only integers appear, so the bytes are the
//! same on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mdc_core::synth::{generate_corpus, vocabulary, NegativeKind, Record, GRAMMAR_VERSION, IMAGE_SIZE};
use mdc_core::vocab::{TokenId, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::short_hash;

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub grammar_version: u32,
    pub master_seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub vocab_hash: String,
    pub corpus_sha256: String,
}

pub fn vocab_text(vocab: &Vocabulary) -> String {
    vocab.words().iter().map(|w| format!("{w}\n")).collect()
}

pub fn vocab_hash(vocab: &Vocabulary) -> String {
    short_hash(vocab_text(vocab).as_bytes())
}

fn ids(v: &[TokenId]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn record_line(r: &Record) -> String {
    let mut fields = vec![r.seed.to_string(), r.label.to_string(), ids(&r.caption)];
    for kind in NegativeKind::ALL {
        fields.push(r.negatives.get(&kind).map_or("-".into(), |n| ids(n)));
    }
    fields.push(r.pixels.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" "));
    let mut line = fields.join("\t");
    line.push('\n');
    line
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(' ')
        .map(|x| x.parse().map_err(|_| anyhow::anyhow!("bad {what} value {x:?}")))
        .collect()
}

pub fn parse_line(line: &str) -> Result<Record> {
    let f: Vec<&str> = line.split('\t').collect();
    ensure!(f.len() == 7, "expected 7 tab-separated fields, found {}", f.len());
    let mut negatives = BTreeMap::new();
    for (kind, field) in NegativeKind::ALL.into_iter().zip(&f[3..6]) {
        if *field != "-" {
            negatives.insert(kind, parse_list(field, kind.name())?);
        }
    }
    let pixels: Vec<u8> = parse_list(f[6], "pixel")?;
    ensure!(pixels.len() == IMAGE_SIZE * IMAGE_SIZE * 3, "record has {} pixel values", pixels.len());
    Ok(Record {
        seed: f[0].parse().context("bad seed")?,
        label: f[1].parse().context("bad label")?,
        caption: parse_list(f[2], "caption")?,
        negatives,
        pixels,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// True when `dir` exists and has at least one entry.
pub fn non_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generates and writes `count` records for `master_seed` into `dir`.
/// Refuses a non-empty directory unless `force`.
pub fn write_corpus(dir: &Path, count: usize, master_seed: u64, force: bool) -> Result<CorpusManifest> {
    if non_empty_dir(dir) && !force {
        bail!("{} is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir)?;
    let vocab = vocabulary();
    let records = generate_corpus(master_seed, count, &vocab);
    let body: String = records.iter().map(record_line).collect();
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        grammar_version: GRAMMAR_VERSION,
        master_seed,
        count,
        image_size: IMAGE_SIZE,
        vocab_hash: vocab_hash(&vocab),
        corpus_sha256: sha256_hex(body.as_bytes()),
    };
    fs::write(dir.join(CORPUS_FILE), body)?;
    fs::write(dir.join(VOCAB_FILE), vocab_text(&vocab))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocab: Vocabulary,
    pub records: Vec<Record>,
}

/// Reads a corpus directory, checking the manifest's count and digest.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = serde_json::from_str(
        &fs::read_to_string(dir.join(MANIFEST_FILE)).with_context(|| format!("reading corpus manifest in {}", dir.display()))?,
    )?;
    ensure!(
        manifest.format_version == CORPUS_FORMAT_VERSION,
        "corpus format version {} is not supported",
        manifest.format_version
    );
    let words: Vec<String> = fs::read_to_string(dir.join(VOCAB_FILE))?.lines().map(String::from).collect();
    ensure!(words.len() > 4, "vocabulary file is too short");
    let vocab = Vocabulary::new(&words[4..])?;
    ensure!(vocab.words() == words.as_slice(), "vocabulary file has unexpected special tokens");
    ensure!(vocab_hash(&vocab) == manifest.vocab_hash, "vocabulary does not match the manifest");
    let body = fs::read_to_string(dir.join(CORPUS_FILE))?;
    ensure!(sha256_hex(body.as_bytes()) == manifest.corpus_sha256, "corpus file digest does not match the manifest");
    let records = body
        .lines()
        .enumerate()
        .map(|(i, l)| parse_line(l).with_context(|| format!("corpus line {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    ensure!(records.len() == manifest.count, "manifest count {} but {} records", manifest.count, records.len());
    for r in &records {
        vocab.check_ids(&r.caption)?;
    }
    Ok(Corpus { manifest, vocab, records })
}

//! On-disk formats: `.vcft` feature matrices, corpus directories with JSONL
//! manifests, N-best stores, decode outputs, and run metadata. Everything is
//! written so that a rerun with the same inputs produces byte-identical
//! files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::grounding::JointEmbedding;
use crate::synthdata::{Corpus, Lexicon, MaskSpan};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

const VCFT_MAGIC: &[u8; 4] = b"VCFT";

pub fn write_vcft(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * t.len());
    bytes.extend_from_slice(VCFT_MAGIC);
    bytes.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_vcft(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(fail("truncated header"));
    }
    if &bytes[..4] != VCFT_MAGIC {
        return Err(fail("bad magic, not a feature matrix"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = 12 + 4 * rows * cols;
    if bytes.len() != want {
        return Err(fail("size does not match header"));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// One utterance as stored on disk and consumed by models: masked-or-clean
/// audio, extracted visual features, and optionally the raw video it came
/// from (needed only to re-save the corpus).
#[derive(Debug, Clone)]
pub struct DataUtt {
    pub id: String,
    pub words: Vec<String>,
    pub token_ids: Vec<u32>,
    pub audio: Tensor,
    pub visual: Tensor,
    pub raw_video: Option<Tensor>,
    pub mask_spans: Vec<MaskSpan>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub train: Vec<DataUtt>,
    pub dev: Vec<DataUtt>,
    pub test: Vec<DataUtt>,
}

impl Dataset {
    /// Extract visual features for every utterance and package a freshly
    /// generated corpus for saving and model consumption.
    pub fn from_corpus(corpus: Corpus) -> Result<Dataset> {
        let joint =
            JointEmbedding::new(&corpus.lexicon, corpus.config.window_size, corpus.config.stride)?;
        let convert = |utts: Vec<crate::synthdata::Utterance>| -> Result<Vec<DataUtt>> {
            utts.into_iter()
                .map(|u| {
                    let visual = joint.extract_visual_features(&u.raw_video)?;
                    Ok(DataUtt {
                        id: u.id,
                        words: u.words,
                        token_ids: u.token_ids,
                        audio: u.audio,
                        visual,
                        raw_video: Some(u.raw_video),
                        mask_spans: u.mask_spans,
                    })
                })
                .collect()
        };
        Ok(Dataset {
            config: corpus.config,
            lexicon: corpus.lexicon,
            vocab: corpus.vocab,
            train: convert(corpus.train)?,
            dev: convert(corpus.dev)?,
            test: convert(corpus.test)?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[DataUtt]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }

    pub fn split_mut(&mut self, name: &str) -> Result<&mut Vec<DataUtt>> {
        match name {
            "train" => Ok(&mut self.train),
            "dev" => Ok(&mut self.dev),
            "test" => Ok(&mut self.test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    words: Vec<String>,
    token_ids: Vec<u32>,
    audio: String,
    video: String,
    visual: String,
    mask_spans: Vec<MaskSpan>,
}

/// Create `dir` (refusing to clobber unless `force`) and write the corpus:
/// `synth.cfg`, `lexicon.json`, per-split JSONL manifests, and per-utterance
/// feature matrices under `features/`.
pub fn save_corpus(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    let features = dir.join("features");
    fs::create_dir_all(&features)?;
    fs::write(dir.join("synth.cfg"), ds.config.to_text())?;
    fs::write(dir.join("lexicon.json"), serde_json::to_string_pretty(&ds.lexicon)?)?;
    for split in SPLITS {
        let utts = ds.split(split)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("manifest.{split}.jsonl")))?);
        for u in utts {
            let raw = u.raw_video.as_ref().ok_or_else(|| {
                Error::Input(format!("utterance {} has no raw video to save", u.id))
            })?;
            let rec = ManifestRecord {
                id: u.id.clone(),
                words: u.words.clone(),
                token_ids: u.token_ids.clone(),
                audio: format!("features/{}.audio.vcft", u.id),
                video: format!("features/{}.video.vcft", u.id),
                visual: format!("features/{}.vis.vcft", u.id),
                mask_spans: u.mask_spans.clone(),
            };
            write_vcft(&features.join(format!("{}.audio.vcft", u.id)), &u.audio)?;
            write_vcft(&features.join(format!("{}.video.vcft", u.id)), raw)?;
            write_vcft(&features.join(format!("{}.vis.vcft", u.id)), &u.visual)?;
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}

/// Load a corpus directory. Raw video matrices are skipped unless
/// `load_raw` (models only consume audio and extracted visual features).
pub fn load_corpus(dir: &Path, load_raw: bool) -> Result<Dataset> {
    let config = SynthConfig::from_text(&fs::read_to_string(dir.join("synth.cfg"))?)?;
    let lexicon: Lexicon = serde_json::from_str(&fs::read_to_string(dir.join("lexicon.json"))?)?;
    let vocab = Vocab::new(&lexicon.word_list());
    let mut splits = Vec::new();
    for split in SPLITS {
        let path = dir.join(format!("manifest.{split}.jsonl"));
        let file = fs::File::open(&path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let mut utts = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)?;
            utts.push(DataUtt {
                audio: read_vcft(&dir.join(&rec.audio))?,
                visual: read_vcft(&dir.join(&rec.visual))?,
                raw_video: if load_raw { Some(read_vcft(&dir.join(&rec.video))?) } else { None },
                id: rec.id,
                words: rec.words,
                token_ids: rec.token_ids,
                mask_spans: rec.mask_spans,
            });
        }
        splits.push(utts);
    }
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset { config, lexicon, vocab, train, dev, test })
}

/// One decoded hypothesis as serialized in N-best stores and decode outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HypRecord {
    pub tokens: Vec<u32>,
    pub words: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    pub hyps: Vec<HypRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub n_best: Vec<HypRecord>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Everything needed to re-run a command bit-identically: the invocation,
/// the seeds in play, and content hashes of the inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub args: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub input_hashes: BTreeMap<String, String>,
}

impl RunMeta {
    pub fn new(command: &str, args: &[String]) -> RunMeta {
        RunMeta {
            command: command.to_string(),
            args: args.to_vec(),
            seeds: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Stable content hash of a whole directory tree (sorted relative paths).
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(f)?);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, tiny_config};
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn vcft_round_trips_to_f32_precision() {
        let dir = tmp();
        let mut rng = crate::seeds::rng(1, "t");
        let t = Tensor::from_fn(7, 5, |_, _| rng.gen::<f64>() * 10.0 - 5.0);
        let path = dir.path().join("x.vcft");
        write_vcft(&path, &t).unwrap();
        let back = read_vcft(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, *a as f32 as f64);
        }
        // A second write is byte-identical.
        let path2 = dir.path().join("y.vcft");
        write_vcft(&path2, &t).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn vcft_rejects_corrupt_files() {
        let dir = tmp();
        let path = dir.path().join("bad.vcft");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_vcft(&path), Err(Error::Format(_))));
        let t = Tensor::zeros(2, 2);
        write_vcft(&path, &t).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_vcft(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let ds = Dataset::from_corpus(generate_corpus(&tiny_config()).unwrap()).unwrap();
        let dir = tmp();
        let root = dir.path().join("corpus");
        save_corpus(&ds, &root, false).unwrap();
        let back = load_corpus(&root, true).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.config.to_text(), ds.config.to_text());
        assert_eq!(back.vocab.size(), ds.vocab.size());
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.words, b.words);
            assert_eq!(a.token_ids, b.token_ids);
            assert_eq!(a.mask_spans, b.mask_spans);
            for (x, y) in a.audio.data().iter().zip(b.audio.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
            assert_eq!(a.visual.shape(), b.visual.shape());
        }
        let slim = load_corpus(&root, false).unwrap();
        assert!(slim.train[0].raw_video.is_none());
    }

    #[test]
    fn resave_is_byte_identical() {
        let ds = Dataset::from_corpus(generate_corpus(&tiny_config()).unwrap()).unwrap();
        let dir = tmp();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_corpus(&ds, &a, false).unwrap();
        let reloaded = load_corpus(&a, true).unwrap();
        save_corpus(&reloaded, &b, false).unwrap();
        assert_eq!(sha256_dir(&a).unwrap(), sha256_dir(&b).unwrap());
    }

    #[test]
    fn existing_directory_needs_force() {
        let ds = Dataset::from_corpus(generate_corpus(&tiny_config()).unwrap()).unwrap();
        let dir = tmp();
        let root = dir.path().join("corpus");
        save_corpus(&ds, &root, false).unwrap();
        assert!(matches!(save_corpus(&ds, &root, false), Err(Error::Config(_))));
        save_corpus(&ds, &root, true).unwrap();
    }

    #[test]
    fn nbest_records_round_trip() {
        let dir = tmp();
        let path = dir.path().join("nbest.jsonl");
        let recs = vec![
            NBestRecord {
                id: "dev-00000".into(),
                hyps: vec![
                    HypRecord { tokens: vec![5, 6, 2], words: vec!["c00".into(), "f01".into()], score: -1.25 },
                    HypRecord { tokens: vec![5, 2], words: vec!["c00".into()], score: -2.5 },
                ],
            },
            NBestRecord { id: "dev-00001".into(), hyps: vec![] },
        ];
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<NBestRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].hyps, recs[0].hyps);
        assert_eq!(back[1].id, "dev-00001");
    }

    #[test]
    fn run_meta_written_with_inputs() {
        let dir = tmp();
        let mut meta = RunMeta::new("train", &["--steps".into(), "10".into()]);
        meta.seeds.insert("root".into(), 7);
        meta.input_hashes.insert("corpus".into(), "ab".into());
        meta.write(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("run.json")).unwrap();
        let back: RunMeta = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.seeds["root"], 7);
    }

    #[test]
    fn dir_hash_tracks_content() {
        let dir = tmp();
        let root = dir.path().join("x");
        fs::create_dir(&root).unwrap();
        fs::write(root.join("a.txt"), "one").unwrap();
        let h1 = sha256_dir(&root).unwrap();
        fs::write(root.join("a.txt"), "two").unwrap();
        let h2 = sha256_dir(&root).unwrap();
        assert_ne!(h1, h2);
        assert_eq!(h2.len(), 64);
    }
}


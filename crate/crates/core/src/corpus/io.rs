use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusMeta, SentencePair, Vocab};
use crate::error::{Error, Result};

fn with_ext(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join(format!("{name}.{ext}"))
}

/// Writes via a temporary sibling then renames, so readers never see a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn lines(sentences: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s);
        out.push('\n');
    }
    out
}

pub fn corpus_exists(dir: &Path, name: &str) -> bool {
    ["src", "tgt", "meta.json"].iter().all(|ext| with_ext(dir, name, ext).is_file())
}

/// `<name>.src`, `<name>.tgt` (one space-separated sentence per line) and `<name>.meta.json`.
pub fn write_corpus(dir: &Path, name: &str, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let src = lines(corpus.pairs.iter().map(|p| p.src.join(" ")));
    let tgt = lines(corpus.pairs.iter().map(|p| p.tgt.join(" ")));
    write_atomic(&with_ext(dir, name, "src"), src.as_bytes())?;
    write_atomic(&with_ext(dir, name, "tgt"), tgt.as_bytes())?;
    let mut meta = serde_json::to_string_pretty(&corpus.meta)?;
    meta.push('\n');
    write_atomic(&with_ext(dir, name, "meta.json"), meta.as_bytes())
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

pub fn read_corpus(dir: &Path, name: &str) -> Result<Corpus> {
    let src_path = with_ext(dir, name, "src");
    let src = read_lines(&src_path)?;
    let tgt = read_lines(&with_ext(dir, name, "tgt"))?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} source lines vs {} target lines",
            src_path.display(),
            src.len(),
            tgt.len()
        )));
    }
    if let Some(i) = (0..src.len()).find(|&i| src[i].is_empty() || tgt[i].is_empty()) {
        return Err(Error::InvalidArgument(format!("{}: empty sentence at line {}", src_path.display(), i + 1)));
    }
    let meta_path = with_ext(dir, name, "meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&meta_text)?;
    let pairs = src.into_iter().zip(tgt).map(|(src, tgt)| SentencePair { src, tgt }).collect();
    Ok(Corpus { pairs, meta })
}

/// One token per line in id order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_atomic(path, lines(vocab.tokens().iter().cloned()).as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(text.lines().map(str::to_owned).collect())
}

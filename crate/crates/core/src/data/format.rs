//! On-disk formats.
//!
//! `*.feats` is a sequence of records, one per utterance, all integers and
//! floats little-endian:
//!
//! ```text
//! u32 id_len | id (UTF-8) | u32 T | u32 F | T·F × f64 (row-major)
//! ```
//!
//! `*.text` is UTF-8: a header line `#cjst-text v1 domain=in|out`, then one
//! `id<TAB>space-separated token ids` line per utterance. `vocab.txt` lists
//! the regular token ids `0..V`, one per line.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Domain, TextUtterance, Utterance};
use crate::error::Error;
use crate::numerics::Tensor;

const TEXT_HEADER: &str = "#cjst-text v1 domain=";

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial `path` behind.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Error> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".partial");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn to_u32(n: usize, what: &str) -> std::io::Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} {n} exceeds u32")))
}

pub fn write_feats<'a>(path: &Path, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), Error> {
    write_atomic(path, |w| {
        for (id, feats) in records {
            w.write_all(&to_u32(id.len(), "id length")?)?;
            w.write_all(id.as_bytes())?;
            w.write_all(&to_u32(feats.rows(), "frame count")?)?;
            w.write_all(&to_u32(feats.cols(), "feature dimension")?)?;
            for x in feats.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn read_feats(path: &Path) -> Result<Vec<(String, Tensor)>, Error> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    let mut pos = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    let mut out = Vec::new();
    loop {
        let Some(head) = take(4) else { break };
        let id_len = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        let id = take(id_len).ok_or_else(|| corrupt("truncated id"))?;
        let id = String::from_utf8(id.to_vec()).map_err(|_| corrupt("id is not UTF-8"))?;
        let mut dim = || take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
        let t = dim().ok_or_else(|| corrupt("truncated frame count"))?;
        let f = dim().ok_or_else(|| corrupt("truncated feature dimension"))?;
        let raw = take(t * f * 8).ok_or_else(|| corrupt(&format!("truncated features for `{id}`")))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(&format!("non-finite features for `{id}`")));
        }
        out.push((id, Tensor::matrix(t, f, data)?));
    }
    // trailing bytes shorter than a record header are corruption too
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

/// Parsed `*.text` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextFile {
    pub domain: Domain,
    pub entries: Vec<(String, Vec<usize>)>,
}

impl TextFile {
    pub fn into_utterances(self) -> Vec<TextUtterance> {
        let domain = self.domain;
        self.entries
            .into_iter()
            .map(|(id, tokens)| TextUtterance { id, tokens, domain })
            .collect()
    }
}

pub fn write_text<'a>(path: &Path, domain: Domain, entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Result<(), Error> {
    write_atomic(path, |w| {
        writeln!(w, "{TEXT_HEADER}{}", domain.name())?;
        for (id, tokens) in entries {
            let toks: Vec<String> = tokens.iter().map(usize::to_string).collect();
            writeln!(w, "{id}\t{}", toks.join(" "))?;
        }
        Ok(())
    })
}

pub fn read_text(path: &Path) -> Result<TextFile, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let at = |n: usize, msg: String| Error::Data(format!("{}:{n}: {msg}", path.display()));
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| at(1, "missing header".into()))?;
    let domain = header
        .strip_prefix(TEXT_HEADER)
        .and_then(Domain::parse)
        .ok_or_else(|| at(1, format!("bad header `{header}`")))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, toks) = line.split_once('\t').ok_or_else(|| at(i + 2, "expected `id<TAB>tokens`".into()))?;
        let tokens = toks
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| at(i + 2, format!("bad token `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push((id.to_string(), tokens));
    }
    Ok(TextFile { domain, entries })
}

pub fn write_vocab(path: &Path, size: usize) -> Result<(), Error> {
    write_atomic(path, |w| (0..size).try_for_each(|t| writeln!(w, "{t}")))
}

/// Reads `vocab.txt` and returns `V`.
pub fn read_vocab(path: &Path) -> Result<usize, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().parse::<usize>().ok() != Some(i) {
            return Err(Error::Data(format!("{}:{}: expected token id {i}", path.display(), i + 1)));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{}: empty vocabulary", path.display())));
    }
    Ok(n)
}

/// Pairs feature records with transcripts by id, in feature-file order.
pub fn join_paired(feats: Vec<(String, Tensor)>, text: TextFile, vocab_size: usize) -> Result<Vec<Utterance>, Error> {
    let mut by_id: HashMap<String, Vec<usize>> = text.entries.into_iter().collect();
    feats
        .into_iter()
        .map(|(id, features)| {
            let tokens = by_id
                .remove(&id)
                .ok_or_else(|| Error::Data(format!("no transcript for utterance `{id}`")))?;
            if tokens.is_empty() {
                return Err(Error::Data(format!("empty transcript for utterance `{id}`")));
            }
            if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Data(format!("token {bad} of `{id}` is outside the vocabulary of {vocab_size}")));
            }
            Ok(Utterance {
                id,
                features,
                tokens,
                domain: text.domain,
            })
        })
        .collect()
}

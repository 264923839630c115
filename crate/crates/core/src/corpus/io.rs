use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Corpus, EvalSets, MiningSet, ParallelPair, RetrievalSet, Sentence, TatoebaSet, Vocab};
use crate::error::{Error, Result};

fn read(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("{what} ({})", path.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn sentence_text(vocab: &Vocab, s: &Sentence) -> Result<String> {
    Ok(vocab.surfaces(&s.words)?.join(" "))
}

fn parse_lang(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("{}:{}: bad language id `{field}`", path.display(), line + 1)))
}

fn parse_sentence(vocab: &Vocab, lang: &str, text: &str, path: &Path, line: usize) -> Result<Sentence> {
    let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
    Ok(Sentence {
        lang: parse_lang(lang, path, line)?,
        words: vocab.ids(&words)?,
    })
}

/// `lang_a<TAB>tokens_a<TAB>lang_b<TAB>tokens_b[<TAB>gold]` per line.
pub fn write_pairs(path: &Path, vocab: &Vocab, pairs: &[ParallelPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            p.a.lang,
            sentence_text(vocab, &p.a)?,
            p.b.lang,
            sentence_text(vocab, &p.b)?
        ));
        if let Some(g) = p.gold {
            out.push_str(&format!("\t{g}"));
        }
        out.push('\n');
    }
    write(path, &out)
}

pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<ParallelPair>> {
    read(path, "pair file")?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 && f.len() != 5 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 4 or 5 tab-separated fields, found {}",
                    path.display(),
                    i + 1,
                    f.len()
                )));
            }
            let gold = match f.get(4) {
                Some(g) => Some(
                    g.parse::<f64>()
                        .map_err(|_| Error::Format(format!("{}:{}: bad gold `{g}`", path.display(), i + 1)))?,
                ),
                None => None,
            };
            Ok(ParallelPair {
                concepts: Vec::new(),
                concepts_b: Vec::new(),
                a: parse_sentence(vocab, f[0], f[1], path, i)?,
                b: parse_sentence(vocab, f[2], f[3], path, i)?,
                gold,
            })
        })
        .collect()
}

/// `lang<TAB>tokens` per line.
pub fn write_sentences(path: &Path, vocab: &Vocab, sentences: &[Sentence]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&format!("{}\t{}\n", s.lang, sentence_text(vocab, s)?));
    }
    write(path, &out)
}

pub fn read_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Sentence>> {
    read(path, "sentence file")?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let (lang, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected `lang<TAB>tokens`", path.display(), i + 1)))?;
            parse_sentence(vocab, lang, text, path, i)
        })
        .collect()
}

/// Tab-separated index tuples, one per line.
pub fn write_gold(path: &Path, rows: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        let cols: Vec<String> = r.iter().map(|x| x.to_string()).collect();
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    write(path, &out)
}

pub fn read_gold(path: &Path, width: usize) -> Result<Vec<Vec<usize>>> {
    read(path, "gold file")?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let row = line
                .split('\t')
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("{}:{}: bad index", path.display(), i + 1)))?;
            if row.len() != width {
                return Err(Error::Format(format!(
                    "{}:{}: expected {width} columns",
                    path.display(),
                    i + 1
                )));
            }
            Ok(row)
        })
        .collect()
}

/// One token per line; the line number is the id.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = vocab.tokens().join("\n");
    out.push('\n');
    write(path, &out)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read(path, "vocabulary")?;
    Vocab::from_tokens(text.lines().map(str::to_string).collect())
}

/// File layout of a generated corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub dir: PathBuf,
}

impl CorpusFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CorpusFiles { dir: dir.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    pub fn train(&self) -> PathBuf {
        self.dir.join("train.tsv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    fn set(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.tsv"))
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.set(name);
        if !p.exists() {
            return Err(Error::io(
                format!("missing evaluation set `{name}`"),
                std::io::Error::new(std::io::ErrorKind::NotFound, p.display().to_string()),
            ));
        }
        Ok(p)
    }

    /// Writes every set and returns the files written, in order.
    pub fn write(&self, corpus: &Corpus) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(self.dir.display().to_string(), e))?;
        let v = &corpus.vocab;
        let e = &corpus.eval;
        let mut written = Vec::new();
        let mut put = |p: PathBuf| {
            written.push(p.clone());
            p
        };
        write_vocab(&put(self.vocab()), v)?;
        write_pairs(&put(self.train()), v, &corpus.train)?;
        write_pairs(&put(self.set("sts_mono")), v, &e.sts_mono)?;
        write_pairs(&put(self.set("sts_cross")), v, &e.sts_cross)?;
        for t in &e.tatoeba {
            write_pairs(&put(self.set(&format!("tatoeba.l{}", t.lang))), v, &t.pairs)?;
        }
        for m in &e.mining {
            let base = format!("mining.l{}", m.lang);
            write_sentences(&put(self.set(&format!("{base}.src"))), v, &m.src)?;
            write_sentences(&put(self.set(&format!("{base}.tgt"))), v, &m.tgt)?;
            let gold: Vec<Vec<usize>> = m.gold.iter().map(|&(s, t)| vec![s, t]).collect();
            write_gold(&put(self.set(&format!("{base}.gold"))), &gold)?;
        }
        for (name, r) in [
            ("retrieval_primary", &e.retrieval_primary),
            ("retrieval_multilingual", &e.retrieval_multilingual),
        ] {
            write_sentences(&put(self.set(&format!("{name}.kb"))), v, &r.kb)?;
            write_sentences(&put(self.set(&format!("{name}.queries"))), v, &r.queries)?;
            let gold: Vec<Vec<usize>> = r.gold.iter().map(|&g| vec![g]).collect();
            write_gold(&put(self.set(&format!("{name}.gold"))), &gold)?;
        }
        Ok(written)
    }

    pub fn read_vocab(&self) -> Result<Vocab> {
        read_vocab(&self.vocab())
    }

    pub fn read_train(&self, vocab: &Vocab) -> Result<Vec<ParallelPair>> {
        read_pairs(&self.train(), vocab)
    }

    fn read_retrieval(&self, name: &str, vocab: &Vocab) -> Result<RetrievalSet> {
        let kb = read_sentences(&self.require(&format!("{name}.kb"))?, vocab)?;
        let queries = read_sentences(&self.require(&format!("{name}.queries"))?, vocab)?;
        let gold: Vec<usize> = read_gold(&self.require(&format!("{name}.gold"))?, 1)?
            .into_iter()
            .map(|r| r[0])
            .collect();
        if gold.len() != queries.len() || gold.iter().any(|&g| g >= kb.len()) {
            return Err(Error::Format(format!("{name}: gold does not match queries/kb")));
        }
        Ok(RetrievalSet { kb, queries, gold })
    }

    /// Reads every evaluation set; a missing file names its set.
    pub fn read_eval(&self, vocab: &Vocab) -> Result<EvalSets> {
        let n = vocab.n_languages();
        let sts_mono = read_pairs(&self.require("sts_mono")?, vocab)?;
        let sts_cross = read_pairs(&self.require("sts_cross")?, vocab)?;
        let mut tatoeba = Vec::new();
        let mut mining = Vec::new();
        for lang in 1..n {
            tatoeba.push(TatoebaSet {
                lang,
                pairs: read_pairs(&self.require(&format!("tatoeba.l{lang}"))?, vocab)?,
            });
            let base = format!("mining.l{lang}");
            let src = read_sentences(&self.require(&format!("{base}.src"))?, vocab)?;
            let tgt = read_sentences(&self.require(&format!("{base}.tgt"))?, vocab)?;
            let gold: Vec<(usize, usize)> = read_gold(&self.require(&format!("{base}.gold"))?, 2)?
                .into_iter()
                .map(|r| (r[0], r[1]))
                .collect();
            if gold.iter().any(|&(s, t)| s >= src.len() || t >= tgt.len()) {
                return Err(Error::Format(format!("{base}: gold index out of range")));
            }
            mining.push(MiningSet { lang, src, tgt, gold });
        }
        Ok(EvalSets {
            sts_mono,
            sts_cross,
            tatoeba,
            mining,
            retrieval_primary: self.read_retrieval("retrieval_primary", vocab)?,
            retrieval_multilingual: self.read_retrieval("retrieval_multilingual", vocab)?,
        })
    }
}

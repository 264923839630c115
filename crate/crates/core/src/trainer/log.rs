use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::StepRecord;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "step,lr,kl_weight,total,recon_a,recon_b,kl_sem,kl_lang_a,kl_lang_b,translation_ab,translation_ba,contrastive";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.kl_weight,
            l.total,
            l.recon_a,
            l.recon_b,
            l.kl_sem,
            l.kl_lang_a,
            l.kl_lang_b,
            l.translation_ab,
            l.translation_ba,
            l.contrastive
        )
    }
}

/// Append-only loss CSV.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Starts a fresh log with a header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut log = LossLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        log.line(CSV_HEADER)?;
        Ok(log)
    }

    /// Reopens an existing log, dropping rows after `step` so a resumed run
    /// continues it seamlessly.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let ctx = |e| Error::io(path.display().to_string(), e);
        let file = File::open(path).map_err(ctx)?;
        let mut kept = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(ctx)?;
            if i == 0 {
                if line != CSV_HEADER {
                    return Err(Error::Format(format!("{}: not a loss log", path.display())));
                }
                continue;
            }
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}:{}: bad step", path.display(), i + 1)))?;
            if s <= step {
                kept.push(line);
            }
        }
        let mut log = Self::create(path)?;
        for line in kept {
            log.line(&line)?;
        }
        log.flush()?;
        let file = OpenOptions::new().append(true).open(path).map_err(ctx)?;
        log.out = BufWriter::new(file);
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        self.line(&rec.csv_row())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

impl Drop for LossLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

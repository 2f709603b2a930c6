//! Corpus handling, synthetic task generation, and the training loop.
//!
//! Corpora are four-column TSV files (src_lang, tgt_lang, src_text,
//! tgt_text) with no header. The synthetic languages render the same symbol
//! stream at 1, 2, or 3 UTF-8 bytes per symbol with no separators, so the
//! byte-length ratio between renderings is exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamState};
use crate::tokenizer::{encode, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub records: Vec<Record>,
}

impl ParallelCorpus {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "line {}: expected 4 tab-separated columns, got {}",
                    i + 1,
                    cols.len()
                )));
            }
            records.push(Record {
                src_lang: cols[0].to_string(),
                tgt_lang: cols[1].to_string(),
                src_text: cols[2].to_string(),
                tgt_text: cols[3].to_string(),
            });
        }
        Ok(ParallelCorpus { records })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.src_lang, r.tgt_lang, r.src_text, r.tgt_text
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// All language codes appearing on either side, sorted and deduplicated.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| [r.src_lang.clone(), r.tgt_lang.clone()])
            .collect();
        langs.sort();
        langs.dedup();
        langs
    }
}

/// Token-id pairs ready for the model.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    vocab: &Vocab,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    corpus
        .records
        .iter()
        .map(|r| {
            Ok((
                encode(&r.src_text, &r.src_lang, vocab)?.ids,
                encode(&r.tgt_text, &r.tgt_lang, vocab)?.ids,
            ))
        })
        .collect()
}

/// A synthetic language is a fixed symbol→string code at a constant UTF-8
/// width. Symbols index an alphabet of at most 26 entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SymbolWidth {
    /// ASCII letters starting at `a` (1 byte each).
    One,
    /// Latin letters with diacritics starting at U+00E0 (2 bytes each).
    Two,
    /// CJK ideographs starting at U+4E00 (3 bytes each).
    Three,
}

impl SymbolWidth {
    pub fn bytes(&self) -> usize {
        match self {
            SymbolWidth::One => 1,
            SymbolWidth::Two => 2,
            SymbolWidth::Three => 3,
        }
    }

    pub fn render_symbol(&self, s: usize) -> char {
        debug_assert!(s < 26);
        let base = match self {
            SymbolWidth::One => 'a' as u32,
            SymbolWidth::Two => 0x00E0,
            SymbolWidth::Three => 0x4E00,
        };
        char::from_u32(base + s as u32).expect("symbol in valid range")
    }

    pub fn render(&self, symbols: &[usize]) -> String {
        symbols.iter().map(|&s| self.render_symbol(s)).collect()
    }
}

/// What the model must do with the symbol stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    /// Target repeats the source symbols.
    Copy,
    /// Target shifts every symbol by one within the alphabet.
    Substitute,
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub src_lang: String,
    pub src_width: SymbolWidth,
    pub tgt_lang: String,
    pub tgt_width: SymbolWidth,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_sentences: usize,
    pub task: Task,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            src_lang: "s1".into(),
            src_width: SymbolWidth::One,
            tgt_lang: "t1".into(),
            tgt_width: SymbolWidth::One,
            alphabet: 8,
            min_len: 3,
            max_len: 8,
            n_sentences: 200,
            task: Task::Copy,
            seed: 1,
        }
    }
}

/// Deterministic synthetic parallel corpus.
pub fn make_synthetic_corpus(cfg: &SyntheticConfig) -> Result<ParallelCorpus> {
    if cfg.alphabet == 0 || cfg.alphabet > 26 {
        return Err(Error::InvalidConfig(format!(
            "alphabet size {} outside 1..=26",
            cfg.alphabet
        )));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::InvalidConfig(format!(
            "bad sentence length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.alphabet)).collect();
        let target: Vec<usize> = match cfg.task {
            Task::Copy => symbols.clone(),
            Task::Substitute => symbols.iter().map(|&s| (s + 1) % cfg.alphabet).collect(),
        };
        records.push(Record {
            src_lang: cfg.src_lang.clone(),
            tgt_lang: cfg.tgt_lang.clone(),
            src_text: cfg.src_width.render(&symbols),
            tgt_text: cfg.tgt_width.render(&target),
        });
    }
    Ok(ParallelCorpus { records })
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    /// Inverse-square-root schedule warmup steps.
    pub warmup: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub smoothing: f64,
    pub valid_every: usize,
    /// Stop after this many consecutive non-improving validations.
    pub patience: usize,
    /// How many trailing checkpoints to average after training.
    pub average_last: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup: 400,
            steps: 1000,
            batch_size: 8,
            smoothing: 0.1,
            valid_every: 50,
            patience: 10,
            average_last: 5,
            seed: 1,
        }
    }
}

/// Inverse-square-root schedule with linear warmup; peaks at `lr` when
/// `step == warmup`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup.max(1) as f64;
    cfg.lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Debug)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub best_valid: f64,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Loss log as `step\ttrain_loss\tvalid_loss` lines.
    pub fn log_text(&self) -> String {
        let mut out = String::from("step\ttrain_loss\tvalid_loss\n");
        for e in &self.log {
            let valid = e
                .valid_loss
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{}\t{:.6}\t{}", e.step, e.train_loss, valid);
        }
        out
    }
}

/// Adam training loop with periodic validation, early stopping, and
/// per-validation checkpoints. Fails fast with a divergence error when the
/// loss stops being finite.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_pairs: &[(Vec<usize>, Vec<usize>)],
    valid_pairs: &[(Vec<usize>, Vec<usize>)],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if train_pairs.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig(
            "batch size and step count must be positive".into(),
        ));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut report = TrainReport {
        steps_run: 0,
        best_valid: f64::INFINITY,
        stopped_early: false,
        log: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut bad_validations = 0usize;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_pairs[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = model.loss_and_grads(&batch, cfg.smoothing, Some(&mut drop_rng))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam_step(model.params_mut(), &grads, &mut state, lr_at(cfg, step))?;
        report.steps_run = step;

        let validate = step % cfg.valid_every.max(1) == 0 || step == cfg.steps;
        if !validate {
            continue;
        }
        let valid_loss = if valid_pairs.is_empty() {
            None
        } else {
            Some(model.loss_value(valid_pairs, cfg.smoothing)?)
        };
        report.log.push(LogEntry {
            step,
            train_loss: loss,
            valid_loss,
        });
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("step{step:06}.ckpt"));
            save_model(model, &path)?;
            report.checkpoints.push(path);
        }
        if let Some(v) = valid_loss {
            if !v.is_finite() {
                return Err(Error::Diverged { step, loss: v });
            }
            if v < report.best_valid {
                report.best_valid = v;
                bad_validations = 0;
            } else {
                bad_validations += 1;
                if bad_validations >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Replace the model with the mean of its last `average_last` checkpoints.
pub fn apply_checkpoint_average(model: &mut Model, report: &TrainReport, n: usize) -> Result<()> {
    if n == 0 || report.checkpoints.is_empty() {
        return Ok(());
    }
    let take = n.min(report.checkpoints.len());
    let tail = &report.checkpoints[report.checkpoints.len() - take..];
    *model = crate::checkpoint::average_checkpoints(tail)?;
    Ok(())
}

/// Teacher-forced next-token accuracy over non-PAD target positions.
pub fn token_accuracy(model: &Model, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (src, tgt) in pairs {
        let enc = model.encode_source(src, crate::model::LidMode::FromSource, None)?;
        for t in 1..tgt.len() {
            if tgt[t] == crate::tokenizer::PAD_ID {
                continue;
            }
            let lp = model.next_log_probs(&enc, &tgt[..t])?;
            let best = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            if best == tgt[t] {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no target tokens to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tokenizer::build_vocab;

    #[test]
    fn tsv_roundtrip() {
        let text = "en\tde\thello\thallo\nde\ten\twelt\tworld\n";
        let c = ParallelCorpus::from_tsv(text).unwrap();
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.records[0].src_text, "hello");
        assert_eq!(c.to_tsv(), text);
    }

    #[test]
    fn malformed_tsv_is_rejected() {
        assert!(ParallelCorpus::from_tsv("en\tde\tmissing-col\n").is_err());
        assert!(ParallelCorpus::from_tsv("a\tb\tc\td\te\n").is_err());
    }

    #[test]
    fn corpus_languages_sorted_unique() {
        let c = ParallelCorpus::from_tsv("zz\ten\tx\ty\nen\tde\tx\ty\n").unwrap();
        assert_eq!(c.languages(), vec!["de", "en", "zz"]);
    }

    #[test]
    fn symbol_widths_render_expected_byte_counts() {
        let syms = [0usize, 1, 25];
        assert_eq!(SymbolWidth::One.render(&syms), "abz");
        for (w, expect) in [
            (SymbolWidth::One, 3),
            (SymbolWidth::Two, 6),
            (SymbolWidth::Three, 9),
        ] {
            let s = w.render(&syms);
            assert_eq!(s.len(), expect);
            for ch in s.chars() {
                assert_eq!(ch.len_utf8(), w.bytes());
            }
        }
    }

    #[test]
    fn three_to_one_byte_ratio_is_exact() {
        let cfg = SyntheticConfig {
            src_width: SymbolWidth::Three,
            tgt_width: SymbolWidth::One,
            task: Task::Copy,
            n_sentences: 50,
            ..Default::default()
        };
        let c = make_synthetic_corpus(&cfg).unwrap();
        let src: usize = c.records.iter().map(|r| r.src_text.len()).sum();
        let tgt: usize = c.records.iter().map(|r| r.tgt_text.len()).sum();
        assert_eq!(src, 3 * tgt);
    }

    #[test]
    fn synthetic_corpus_is_seed_deterministic() {
        let cfg = SyntheticConfig::default();
        assert_eq!(
            make_synthetic_corpus(&cfg).unwrap(),
            make_synthetic_corpus(&cfg).unwrap()
        );
        let other = make_synthetic_corpus(&SyntheticConfig {
            seed: 2,
            ..cfg
        })
        .unwrap();
        assert_ne!(make_synthetic_corpus(&SyntheticConfig::default()).unwrap(), other);
    }

    #[test]
    fn substitution_task_shifts_symbols() {
        let cfg = SyntheticConfig {
            task: Task::Substitute,
            alphabet: 3,
            n_sentences: 10,
            ..Default::default()
        };
        let c = make_synthetic_corpus(&cfg).unwrap();
        for r in &c.records {
            for (s, t) in r.src_text.chars().zip(r.tgt_text.chars()) {
                let s = s as usize - 'a' as usize;
                let t = t as usize - 'a' as usize;
                assert_eq!(t, (s + 1) % 3);
            }
        }
    }

    #[test]
    fn invalid_synthetic_configs_error() {
        let bad_alpha = SyntheticConfig {
            alphabet: 27,
            ..Default::default()
        };
        assert!(make_synthetic_corpus(&bad_alpha).is_err());
        let bad_len = SyntheticConfig {
            min_len: 5,
            max_len: 2,
            ..Default::default()
        };
        assert!(make_synthetic_corpus(&bad_len).is_err());
    }

    #[test]
    fn lr_schedule_peaks_at_warmup() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 100,
            ..Default::default()
        };
        assert!((lr_at(&cfg, 50) - 0.5).abs() < 1e-12);
        assert!((lr_at(&cfg, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 400) - 0.5).abs() < 1e-12);
        assert!(lr_at(&cfg, 1) < lr_at(&cfg, 99));
    }

    fn toy_setup() -> (Model, Vec<(Vec<usize>, Vec<usize>)>) {
        let corpus = make_synthetic_corpus(&SyntheticConfig {
            alphabet: 4,
            min_len: 2,
            max_len: 4,
            n_sentences: 16,
            ..Default::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus.languages()).unwrap();
        let pairs = encode_corpus(&corpus, &vocab).unwrap();
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            heads: 2,
            ffn: 32,
            delta_max: 2,
            top_k: 2,
            dropout: 0.1,
            ..Default::default()
        };
        (build_model(&cfg, &vocab).unwrap(), pairs)
    }

    #[test]
    fn short_training_run_logs_and_improves() {
        let (mut model, pairs) = toy_setup();
        let before = model.loss_value(&pairs, 0.1).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            warmup: 10,
            lr: 3e-3,
            batch_size: 4,
            valid_every: 20,
            ..Default::default()
        };
        let report = train(&mut model, &cfg, &pairs, &pairs, None).unwrap();
        assert_eq!(report.steps_run, 40);
        let after = model.loss_value(&pairs, 0.1).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(report.log_text().starts_with("step\ttrain_loss\tvalid_loss\n"));
        assert_eq!(report.log.len(), 2);
    }

    #[test]
    fn zero_lr_stops_after_exactly_patience_validations() {
        let (mut model, pairs) = toy_setup();
        let cfg = TrainConfig {
            steps: 1000,
            lr: 0.0,
            batch_size: 2,
            valid_every: 5,
            patience: 3,
            ..Default::default()
        };
        let report = train(&mut model, &cfg, &pairs, &pairs, None).unwrap();
        assert!(report.stopped_early);
        // first validation sets the best; the next `patience` fail to improve
        assert_eq!(report.steps_run, 5 * (1 + 3));
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let (mut model, pairs) = toy_setup();
        model.params_mut()[0].data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            steps: 10,
            valid_every: 5,
            ..Default::default()
        };
        match train(&mut model, &cfg, &pairs, &pairs, None) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_are_written_and_averaged() {
        let (mut model, pairs) = toy_setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 20,
            valid_every: 5,
            batch_size: 2,
            warmup: 5,
            ..Default::default()
        };
        let report = train(&mut model, &cfg, &pairs, &pairs, Some(dir.path())).unwrap();
        assert_eq!(report.checkpoints.len(), 4);
        for p in &report.checkpoints {
            assert!(p.exists());
        }
        let before_avg = model.params()[0].clone();
        apply_checkpoint_average(&mut model, &report, 2).unwrap();
        // averaging trailing checkpoints must move the parameters
        assert_ne!(model.params()[0], before_avg);
    }

    #[test]
    fn token_accuracy_matches_hand_recount() {
        let (model, pairs) = toy_setup();
        let sample = &pairs[..2];
        let acc = token_accuracy(&model, sample).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let mut hits = 0;
        let mut total = 0;
        for (src, tgt) in sample {
            let enc = model
                .encode_source(src, crate::model::LidMode::FromSource, None)
                .unwrap();
            for t in 1..tgt.len() {
                let lp = model.next_log_probs(&enc, &tgt[..t]).unwrap();
                let best = lp
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                hits += (best == tgt[t]) as usize;
                total += 1;
            }
        }
        assert!((acc - hits as f64 / total as f64).abs() < 1e-12);
    }
}

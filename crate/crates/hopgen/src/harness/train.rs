//! Cosine-schedule SGD training with per-epoch JSONL metrics, atomic
//! checkpointing and deterministic shuffling. Same seed, same bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;

use crate::corpus::{build_vocab, load_hotpot_jsonl, Dataset};
use crate::encoder::{load_pretrained_embeddings, EncoderHp};
use crate::entgraph::Lexicon;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::Config;
use crate::harness::loss::cosine_lr;
use crate::harness::model::{forward_loss, init_model, prepare, PreparedExample};
use crate::harness::sgd::{scale_grads, Sgd, CLIP_NORM};
use crate::num::{ParamStore, Session};

/// Stream separators so shuffling, dropout and init draw independently
/// from one configured seed.
const SHUFFLE_SALT: u64 = 0x53485546;
const DROPOUT_SALT: u64 = 0x44524f50;

/// One line of the metrics log. Every field is deterministic for a
/// fixed config and seed; nothing wall-clock dependent belongs here.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Optimizer steps completed so far, this epoch included.
    pub steps: usize,
    /// Learning rate of the last step this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    /// Mean hop-supervision loss over examples that had targets; absent
    /// before `bfs_start_epoch` or when no example has targets.
    pub train_bfs: Option<f64>,
    pub bfs_active: bool,
    /// Teacher-forced mean NLL on the dev set, dropout off.
    pub dev_nll: f64,
    /// Logarithm clamp events across this epoch's passes.
    pub clamp_events: usize,
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub log_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub vocab_path: PathBuf,
    /// Set when `target_train_ce` ended the run before `max_epochs`.
    pub stopped_early: bool,
}

/// Teacher-forced mean NLL over a prepared set, dropout off, plus clamp
/// events observed along the way.
pub fn eval_nll(
    store: &ParamStore,
    pes: &[PreparedExample],
    hp: &EncoderHp,
) -> Result<(f64, usize)> {
    if pes.is_empty() {
        return Err(Error::contract("eval_nll", "empty evaluation set"));
    }
    let mut sum = 0.0;
    let mut clamps = 0;
    for pe in pes {
        let mut s = Session::new(store);
        let parts = forward_loss(&mut s, pe, hp, 0.0, None)?;
        sum += s.g.scalar_value(parts.ce);
        clamps += s.g.log_clamp_events();
    }
    Ok((sum / pes.len() as f64, clamps))
}

fn abort_on_non_finite(loss: f64, step: usize, last_good: Option<&Path>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let hint = match last_good {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint written yet".to_string(),
    };
    Err(Error::contract(
        "train",
        format!("non-finite loss at step {step}; {hint}"),
    ))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

fn load_lexicon(cfg: &Config, ds: &Dataset) -> Result<Lexicon> {
    if let Some(path) = &cfg.lexicon {
        return Lexicon::load(path);
    }
    let lex = Lexicon::new(ds.lexicon_tokens());
    if lex.is_empty() {
        return Err(Error::Config(
            "no lexicon: pass one explicitly or use data with an embedded lexicon".into(),
        ));
    }
    Ok(lex)
}

pub fn train(cfg: &Config) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_hotpot_jsonl(&cfg.train_data)?;
    if ds.is_empty() {
        return Err(Error::data("training data is empty"));
    }
    let lexicon = load_lexicon(cfg, &ds)?;
    let vocab = build_vocab(&ds, cfg.vocab_size)?;
    let hp = cfg.encoder_hp(vocab.len());

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_model(&mut store, &hp, &mut init_rng)?;
    if let Some(path) = &cfg.embeddings {
        load_pretrained_embeddings(&mut store, path, &vocab)?;
    }

    let train_pes: Vec<PreparedExample> = ds
        .examples
        .iter()
        .map(|ex| prepare(ex, &vocab, &lexicon, cfg))
        .collect::<Result<_>>()?;
    let dev_owned: Option<Vec<PreparedExample>> = match &cfg.dev_data {
        Some(path) => {
            let dev_ds = load_hotpot_jsonl(path)?;
            if dev_ds.is_empty() {
                return Err(Error::data("dev data is empty"));
            }
            Some(
                dev_ds
                    .examples
                    .iter()
                    .map(|ex| prepare(ex, &vocab, &lexicon, cfg))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let dev_pes: &[PreparedExample] = dev_owned.as_deref().unwrap_or(&train_pes);

    let ckpt_dir = cfg.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let vocab_path = cfg.out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    lexicon.save(&cfg.out_dir.join("lexicon.txt"))?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let n = train_pes.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
    let mut sgd = Sgd::new(cfg.momentum);

    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut step = 0;
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0;
    let mut last_checkpoint: Option<PathBuf> = None;
    let best_checkpoint = ckpt_dir.join("best.json");
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lambda = if epoch >= cfg.bfs_start_epoch {
            cfg.lambda_bfs
        } else {
            0.0
        };
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut bfs_sum = 0.0;
        let mut bfs_count = 0usize;
        let mut clamp_events = 0usize;
        let mut lr = cosine_lr(step, total_steps, cfg.lr0);

        for batch in order.chunks(cfg.batch_size) {
            store.clear_grads();
            lr = cosine_lr(step, total_steps, cfg.lr0);
            for &i in batch {
                let pe = &train_pes[i];
                let grads = {
                    let mut s = Session::new(&store);
                    let parts = forward_loss(&mut s, pe, &hp, lambda, Some(&mut dropout_rng))?;
                    let total = s.g.scalar_value(parts.total);
                    abort_on_non_finite(total, step, last_checkpoint.as_deref())?;
                    loss_sum += total;
                    ce_sum += s.g.scalar_value(parts.ce);
                    if let Some(b) = parts.bfs {
                        bfs_sum += s.g.scalar_value(b);
                        bfs_count += 1;
                    }
                    let grads = s.backward(parts.total)?;
                    clamp_events += s.g.log_clamp_events();
                    grads
                };
                store.accumulate(&grads)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f64);
            store.clip_global_grad_norm(CLIP_NORM);
            sgd.apply(&mut store, lr);
            step += 1;
        }

        let (dev_nll, dev_clamps) = eval_nll(&store, dev_pes, &hp)?;
        clamp_events += dev_clamps;

        let entry = EpochLog {
            epoch,
            steps: step,
            lr,
            train_loss: loss_sum / n as f64,
            train_ce: ce_sum / n as f64,
            train_bfs: (bfs_count > 0).then(|| bfs_sum / bfs_count as f64),
            bfs_active: lambda > 0.0,
            dev_nll,
            clamp_events,
        };
        serde_json::to_writer(&mut log, &entry)?;
        writeln!(log)?;
        log.flush()?;

        let ckpt = Checkpoint::capture(cfg, &store, step, epoch + 1);
        let ckpt_path = ckpt_dir.join(format!("epoch-{:03}.json", epoch + 1));
        save_checkpoint(&ckpt_path, &ckpt)?;
        last_checkpoint = Some(ckpt_path);
        if dev_nll < best_dev {
            best_dev = dev_nll;
            best_epoch = epoch;
            save_checkpoint(&best_checkpoint, &ckpt)?;
        }

        let reached_target = cfg.target_train_ce.is_some_and(|t| entry.train_ce < t);
        epochs.push(entry);
        if reached_target {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        epochs,
        steps: step,
        best_epoch,
        best_dev,
        log_path,
        last_checkpoint: last_checkpoint.expect("at least one epoch ran"),
        best_checkpoint,
        vocab_path,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Vocab};
    use crate::harness::checkpoint::load_checkpoint;

    fn toy_train_config(dir: &Path, count: usize, seed: u64) -> Config {
        let ds = generate_synthetic(seed, count, 12).unwrap();
        let data = dir.join("train.jsonl");
        ds.write_jsonl(&data).unwrap();
        let lex_path = dir.join("lexicon.txt");
        Lexicon::new(ds.lexicon_tokens()).save(&lex_path).unwrap();
        let mut cfg = Config::default();
        cfg.train_data = data;
        cfg.lexicon = Some(lex_path);
        cfg.out_dir = dir.join("run");
        cfg.embed_dim = 8;
        cfg.tag_dim = 4;
        cfg.hidden_dim = 8;
        cfg.max_entities = 12;
        cfg.max_context_len = 120;
        cfg.vocab_size = 200;
        cfg.batch_size = 2;
        cfg.max_epochs = 2;
        cfg.lr0 = 0.05;
        cfg.bfs_start_epoch = 1;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn identical_seeds_produce_identical_logs_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_train_config(dir.path(), 3, 5);
        let mut cfg_a = cfg.clone();
        cfg_a.out_dir = dir.path().join("a");
        let mut cfg_b = cfg.clone();
        cfg_b.out_dir = dir.path().join("b");
        let out_a = train(&cfg_a).unwrap();
        let out_b = train(&cfg_b).unwrap();
        let log_a = std::fs::read(&out_a.log_path).unwrap();
        let log_b = std::fs::read(&out_b.log_path).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b, "metric logs diverged");
        let ck_a = load_checkpoint(&out_a.last_checkpoint).unwrap();
        let ck_b = load_checkpoint(&out_b.last_checkpoint).unwrap();
        for (name, ea) in &ck_a.params {
            let eb = &ck_b.params[name];
            for (x, y) in ea.values.iter().zip(&eb.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} diverged");
            }
        }
    }

    #[test]
    fn training_reduces_the_loss_and_respects_the_bfs_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_train_config(dir.path(), 3, 9);
        cfg.max_epochs = 6;
        let out = train(&cfg).unwrap();
        assert_eq!(out.epochs.len(), 6);
        let first = &out.epochs[0];
        let last = &out.epochs[5];
        assert!(
            last.train_ce < first.train_ce,
            "ce did not improve: {} -> {}",
            first.train_ce,
            last.train_ce
        );
        assert!(!first.bfs_active && first.train_bfs.is_none());
        assert!(out.epochs[1].bfs_active);
        assert!(out.epochs[1].train_bfs.is_some());
        assert!(out.steps > 0);
    }

    #[test]
    fn checkpoints_reload_to_the_logged_dev_score() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_train_config(dir.path(), 3, 13);
        let out = train(&cfg).unwrap();
        assert!(out.best_checkpoint.exists());
        assert!(out.vocab_path.exists());
        let ckpt = load_checkpoint(&out.last_checkpoint).unwrap();
        assert_eq!(ckpt.epoch, 2);
        let store = ckpt.restore().unwrap();
        let vocab = Vocab::load(&out.vocab_path).unwrap();
        let ds = load_hotpot_jsonl(&cfg.train_data).unwrap();
        let lexicon = Lexicon::load(cfg.lexicon.as_ref().unwrap()).unwrap();
        let pes: Vec<PreparedExample> = ds
            .examples
            .iter()
            .map(|ex| prepare(ex, &vocab, &lexicon, &cfg).unwrap())
            .collect();
        let hp = cfg.encoder_hp(vocab.len());
        let (nll, _) = eval_nll(&store, &pes, &hp).unwrap();
        let logged = out.epochs.last().unwrap().dev_nll;
        assert_eq!(
            nll.to_bits(),
            logged.to_bits(),
            "restored params disagree with the log: {nll} vs {logged}"
        );
    }

    #[test]
    fn target_ce_stops_training_early() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_train_config(dir.path(), 3, 17);
        cfg.max_epochs = 10;
        cfg.target_train_ce = Some(1e6);
        let out = train(&cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn non_finite_losses_abort_with_checkpoint_hint() {
        assert!(abort_on_non_finite(1.5, 3, None).is_ok());
        let err = abort_on_non_finite(f64::NAN, 3, None).unwrap_err();
        assert!(err.to_string().contains("no checkpoint"), "{err}");
        let p = PathBuf::from("run/checkpoints/epoch-002.json");
        let err = abort_on_non_finite(f64::INFINITY, 9, Some(&p)).unwrap_err();
        assert!(err.to_string().contains("epoch-002.json"), "{err}");
    }

    #[test]
    fn shuffle_is_a_permutation_and_seed_dependent() {
        let mut a: Vec<usize> = (0..50).collect();
        let mut b: Vec<usize> = (0..50).collect();
        let mut rng_a = ChaCha8Rng::seed_from_u64(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(1);
        shuffle(&mut a, &mut rng_a);
        shuffle(&mut b, &mut rng_b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let mut c: Vec<usize> = (0..50).collect();
        let mut rng_c = ChaCha8Rng::seed_from_u64(2);
        shuffle(&mut c, &mut rng_c);
        assert_ne!(a, c);
    }
}

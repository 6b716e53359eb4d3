use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::features::{image_tokens, load_images, load_pair_inputs, score_matrices, TextSource};
use super::{
    AlignMapArgs, Command, Direction, FilterArgs, RetrievalArgs, ScoreArgs, StatsArgs,
    SynthArgs, TokenizeArgs, TrainArgs, ZeroShotArgs,
};
use crate::align::{word_patch_alignment, EmbeddingKind};
use crate::corpus::{corpus_stats, run_pipeline_file, FilterConfig, Lexicon, Pipeline};
use crate::error::{Error, Result};
use crate::evalkit::{
    class_embeddings, load_class_names, load_ground_truth, retrieval_eval, round_to,
    zero_shot_classify, PromptSet, RetrievalGroundTruth,
};
use crate::linalg::Mat;
use crate::textenc::Checkpoint;
use crate::tokenizer::{Tokenizer, Vocab};
use crate::train::{
    lit_train, load_model, model_digest, read_captions, synth_task, LogLine, PairDataset,
    TrainConfig, TrainState,
};

pub fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Filter(a) => cmd_filter(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::EvalZeroshot(a) => cmd_eval_zeroshot(a),
        Command::Score(a) => cmd_score(a),
        Command::AlignMap(a) => cmd_align_map(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn mat_rows(m: &Mat<f32>) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn cmd_filter(a: &FilterArgs) -> Result<i32> {
    let mut cfg = FilterConfig::default();
    if let Some(v) = a.min_dim {
        cfg.min_dim = v;
    }
    if let Some(v) = a.max_aspect {
        cfg.max_aspect = v;
    }
    if let Some(v) = a.min_cjk_chars {
        cfg.min_cjk_chars = v;
    }
    if let Some(v) = a.max_cjk_chars {
        cfg.max_cjk_chars = v;
    }
    if let Some(v) = a.max_text_frequency {
        cfg.max_text_frequency = v;
    }
    if let Some(v) = a.keyword_cap {
        cfg.keyword_cap = v;
    }
    if let Some(v) = &a.person_token {
        cfg.person_token = v.clone();
    }
    log::info!("filter config: {}", serde_json::to_string(&cfg)?);
    let names = match &a.names {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::empty(),
    };
    let sensitive = match &a.sensitive {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::empty(),
    };
    let pipeline = Pipeline::new(cfg, names, sensitive)?;
    let mut kept = create(&a.kept)?;
    let mut rejects = create(&a.rejects)?;
    let summary = run_pipeline_file(&pipeline, &a.input, &mut kept, &mut rejects)?;
    kept.flush().map_err(|e| Error::io(&a.kept, e))?;
    rejects.flush().map_err(|e| Error::io(&a.rejects, e))?;
    write_json(None, &summary)?;
    match a.max_errors {
        Some(max) if summary.parse_errors > max => {
            eprintln!(
                "error: {} unreadable input lines (limit {max})",
                summary.parse_errors
            );
            Ok(2)
        }
        _ => Ok(0),
    }
}

fn read_jsonl_captions(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let c = v.get("caption").and_then(|c| c.as_str()).ok_or_else(|| {
            Error::Data(format!("{}:{}: no caption field", path.display(), n + 1))
        })?;
        out.push(c.to_string());
    }
    Ok(out)
}

fn cmd_stats(a: &StatsArgs) -> Result<i32> {
    let tok = Tokenizer::new(Vocab::load(&a.vocab)?).with_granularity(a.granularity.into());
    let captions = read_jsonl_captions(&a.input)?;
    let stats = corpus_stats(captions.iter().map(String::as_str), &tok);
    write_json(a.out.as_deref(), &stats)?;
    Ok(0)
}

fn cmd_tokenize(a: &TokenizeArgs) -> Result<i32> {
    let tok = Tokenizer::new(Vocab::load(&a.vocab)?).with_granularity(a.granularity.into());
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(std::io::BufReader::new(
            File::open(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(std::io::stdin().lock()),
    };
    let mut out = output(a.out.as_deref())?;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let (id, caption) = if a.jsonl {
            if line.trim().is_empty() {
                continue;
            }
            let r = crate::train::CaptionRecord::from_json_line(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            (Some(r.id), r.caption)
        } else {
            (None, line)
        };
        let seq = tok.encode(&caption, a.max_len)?;
        let tokens: Vec<&str> = seq.ids[..seq.real_len()]
            .iter()
            .map(|&i| tok.vocab().token(i).unwrap_or(""))
            .collect();
        let mut v = json!({
            "tokens": tokens,
            "ids": seq.ids,
            "mask": seq.mask,
            "sep_pos": seq.sep_pos,
        });
        if let Some(id) = id {
            v["id"] = json!(id);
        }
        serde_json::to_writer(&mut out, &v)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(0)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig::default();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(batch_size => batch_size, epochs => epochs, lr => peak_lr,
        warmup_steps => warmup_steps, weight_decay => weight_decay, beta1 => lamb_beta1,
        beta2 => lamb_beta2, lamb_eps => lamb_eps, mode => similarity_mode, n_prime => n_prime,
        seed => seed, embed_dim => embed_dim, layers => n_layers, heads => n_heads,
        width => width, max_len => max_len, val_every => val_every);
    if a.steps.is_some() {
        c.steps = a.steps;
    }
    c
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = train_config(a);
    log::info!("train config: {}", serde_json::to_string(&cfg)?);
    let vocab = Vocab::load(&a.vocab)?;
    let tok = Tokenizer::new(vocab).with_granularity(a.granularity.into());
    let emb = crate::align::EmbeddingFile::load(&a.images)?;
    let data = PairDataset::build(&emb, &read_captions(&a.captions)?, &tok, cfg.max_len)?;
    let val = match (&a.val_images, &a.val_captions) {
        (Some(i), Some(c)) => Some(PairDataset::build(
            &crate::align::EmbeddingFile::load(i)?,
            &read_captions(c)?,
            &tok,
            cfg.max_len,
        )?),
        _ => None,
    };
    let vocab_size = tok.vocab().len();
    let mut state = match &a.resume {
        Some(p) => {
            let (state, _) = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if state.model.shape != cfg.shape(vocab_size, emb.dim) {
                return Err(Error::Config(
                    "resumed checkpoint does not match the configured architecture".into(),
                ));
            }
            state
        }
        None => TrainState::init(&cfg, vocab_size, emb.dim)?,
    };
    let mut log_file = a.log.as_deref().map(create).transpose()?;
    let mut log_err: Option<std::io::Error> = None;
    let mut last_loss = None;
    lit_train(&data, val.as_ref(), &cfg, &mut state, &mut |line: LogLine| {
        if let LogLine::Step(s) = &line {
            last_loss = Some(s.loss);
        }
        let text = serde_json::to_string(&line).expect("log lines serialize");
        match &mut log_file {
            Some(f) => {
                if let Err(e) = writeln!(f, "{text}") {
                    log_err.get_or_insert(e);
                }
            }
            None => log::info!("{text}"),
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(a.log.clone().unwrap_or_default(), e));
    }
    if let Some(f) = &mut log_file {
        f.flush()?;
    }
    state.to_checkpoint(&cfg).save(&a.out)?;
    write_json(
        None,
        &json!({
            "checkpoint": a.out,
            "steps": state.step,
            "final_loss": last_loss,
            "tau": state.model.temperature().tau(),
            "model_sha256": model_digest(&state.model),
        }),
    )?;
    Ok(0)
}

fn invert(m: &BTreeMap<usize, BTreeSet<usize>>) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&q, cs) in m {
        for &c in cs {
            out.entry(c).or_default().insert(q);
        }
    }
    out
}

fn cmd_eval_retrieval(a: &RetrievalArgs) -> Result<i32> {
    let inp = load_pair_inputs(&a.inputs)?;
    let (img_ids, txt_ids) = (&inp.images.ids, &inp.texts.ids);
    let file_i2t = a
        .gt_i2t
        .as_ref()
        .map(|p| load_ground_truth(p, img_ids, txt_ids))
        .transpose()?;
    let file_t2i = a
        .gt_t2i
        .as_ref()
        .map(|p| load_ground_truth(p, txt_ids, img_ids))
        .transpose()?;
    let base = match &inp.texts.image_of {
        Some(image_of) => Some(RetrievalGroundTruth::from_pairs(
            image_of.iter().enumerate().map(|(t, &i)| (i, t)),
        )),
        None if img_ids.len() == txt_ids.len() && file_i2t.is_none() && file_t2i.is_none() => {
            Some(RetrievalGroundTruth::diagonal(img_ids.len()))
        }
        None => None,
    };
    let resolve = |own: &Option<BTreeMap<usize, BTreeSet<usize>>>,
                   other: &Option<BTreeMap<usize, BTreeSet<usize>>>,
                   from_base: fn(&RetrievalGroundTruth) -> &BTreeMap<usize, BTreeSet<usize>>|
     -> Result<BTreeMap<usize, BTreeSet<usize>>> {
        if let Some(m) = own {
            return Ok(m.clone());
        }
        if let Some(b) = &base {
            return Ok(from_base(b).clone());
        }
        if let Some(o) = other {
            return Ok(invert(o));
        }
        Err(Error::Data("no ground truth for a requested direction".into()))
    };
    let want_i2t = a.direction != Direction::T2i;
    let want_t2i = a.direction != Direction::I2t;
    let gt = RetrievalGroundTruth {
        image_to_texts: if want_i2t {
            resolve(&file_i2t, &file_t2i, |b| &b.image_to_texts)?
        } else {
            BTreeMap::new()
        },
        text_to_images: if want_t2i {
            resolve(&file_t2i, &file_i2t, |b| &b.text_to_images)?
        } else {
            BTreeMap::new()
        },
    };
    let (s_i, s_t) = score_matrices(
        &inp.images.sets,
        &inp.texts,
        inp.model.as_ref(),
        a.inputs.mode,
    )?;
    let report = retrieval_eval(
        want_i2t.then_some(&s_i),
        want_t2i.then_some(&s_t),
        &gt,
    )?;
    log::info!("mean recall {:.1}", round_to(report.mean_recall, 1));
    write_json(
        a.out.as_deref(),
        &json!({
            "i2t": report.i2t,
            "t2i": report.t2i,
            "mean_recall": report.mean_recall,
            "mean_recall_rounded": round_to(report.mean_recall, 1),
            "counts": {"images": img_ids.len(), "texts": txt_ids.len()},
            "config": {
                "mode": a.inputs.mode.as_str(),
                "direction": format!("{:?}", a.direction).to_lowercase(),
                "images": a.inputs.images,
                "texts": a.inputs.texts,
                "captions": a.inputs.captions,
                "checkpoint": a.inputs.checkpoint,
                "gt_i2t": a.gt_i2t,
                "gt_t2i": a.gt_t2i,
            },
        }),
    )?;
    Ok(0)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, l)| {
            l.parse()
                .map_err(|e| Error::Data(format!("{} label {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn cmd_eval_zeroshot(a: &ZeroShotArgs) -> Result<i32> {
    let model = load_model(&Checkpoint::load(&a.checkpoint)?)?;
    let vocab = Vocab::load(&a.vocab)?;
    if vocab.len() != model.shape.text.vocab_size {
        return Err(Error::Config("vocabulary does not match the checkpoint".into()));
    }
    let tok = Tokenizer::new(vocab).with_granularity(a.granularity.into());
    let images = load_images(&a.images)?;
    let labels = read_labels(&a.labels)?;
    let names = load_class_names(&a.classes)?;
    let prompts = match &a.prompts {
        Some(p) => PromptSet::load(p)?,
        None => PromptSet::default_zh(),
    };
    let max_len = model.shape.text.max_len;
    let classes = class_embeddings(&names, &prompts, |text| {
        model.embed_text(&tok.encode(text, max_len)?)
    })?;
    let rows = images
        .sets
        .iter()
        .map(|s| model.embed_image(s))
        .collect::<Result<Vec<_>>>()?;
    let img = Mat::from_vec(rows.len(), model.shape.embed_dim, rows.concat());
    let report = zero_shot_classify(&img, &classes, &labels)?;
    write_json(
        a.out.as_deref(),
        &json!({
            "top1": report.top1,
            "top1_rounded": round_to(report.top1, 2),
            "correct": report.correct,
            "n_images": report.n_images,
            "n_classes": report.n_classes,
            "config": {
                "checkpoint": a.checkpoint,
                "images": a.images,
                "classes": a.classes,
                "prompts": a.prompts,
                "n_prompts": prompts.templates().len(),
            },
        }),
    )?;
    Ok(0)
}

fn cmd_score(a: &ScoreArgs) -> Result<i32> {
    let inp = load_pair_inputs(&a.inputs)?;
    let (s_i, s_t) = score_matrices(
        &inp.images.sets,
        &inp.texts,
        inp.model.as_ref(),
        a.inputs.mode,
    )?;
    write_json(
        a.out.as_deref(),
        &json!({
            "mode": a.inputs.mode.as_str(),
            "image_ids": inp.images.ids,
            "text_ids": inp.texts.ids,
            "s_i": mat_rows(&s_i),
            "s_t": mat_rows(&s_t),
        }),
    )?;
    Ok(0)
}

fn cmd_align_map(a: &AlignMapArgs) -> Result<i32> {
    let inp = load_pair_inputs(&a.inputs)?;
    let img = inp
        .images
        .sets
        .get(a.image_index)
        .ok_or_else(|| Error::Data(format!("no image item {}", a.image_index)))?;
    if a.text_index >= inp.texts.len() {
        return Err(Error::Data(format!("no text item {}", a.text_index)));
    }
    let img = image_tokens(img, inp.model.as_ref())?;
    let (txt, tokens) = match &inp.texts.source {
        TextSource::Features(f) => (f[a.text_index].clone(), None),
        TextSource::Encoded(seqs) => {
            let seq = &seqs[a.text_index];
            let model = inp.model.as_ref().expect("captions come with a model");
            let vocab = inp.vocab.as_ref().expect("captions come with a vocabulary");
            let tokens: Vec<&str> = seq.ids[..seq.real_len()]
                .iter()
                .map(|&i| vocab.token(i).unwrap_or(""))
                .collect();
            (model.project_text_tokens(seq)?, Some(tokens))
        }
    };
    let map = word_patch_alignment(&img, &txt)?;
    let (h, w) = img.grid.expect("alignment checked the grid");
    let mut v = json!({
        "image": a.image_index,
        "text": inp.texts.ids[a.text_index],
        "h": h,
        "w": w,
        "map": map,
    });
    if let Some(t) = tokens {
        v["tokens"] = json!(t);
    }
    write_json(a.out.as_deref(), &v)?;
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let task = synth_task(a.pairs, a.dim, a.grid, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    task.embeddings.save(a.out_dir.join("images.wkeb"))?;
    let cap_path = a.out_dir.join("captions.jsonl");
    let mut w = create(&cap_path)?;
    for c in &task.captions {
        serde_json::to_writer(&mut w, c)?;
        writeln!(w).map_err(|e| Error::io(&cap_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&cap_path, e))?;
    let vocab_path = a.out_dir.join("vocab.txt");
    std::fs::write(&vocab_path, task.vocab.to_file_string())
        .map_err(|e| Error::io(&vocab_path, e))?;
    write_json(
        None,
        &json!({
            "images": a.out_dir.join("images.wkeb"),
            "captions": cap_path,
            "vocab": vocab_path,
            "pairs": a.pairs,
            "dim": a.dim,
            "grid": a.grid,
            "kind": EmbeddingKind::Image,
        }),
    )?;
    Ok(0)
}

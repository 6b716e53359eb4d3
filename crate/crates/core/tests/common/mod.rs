#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use vlkit::align::{EmbeddingFile, EmbeddingKind, EmbeddingSet};
use vlkit::linalg::Mat;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_vlkit"))
}

pub fn vlkit(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vlkit")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Scores for a query set whose every row ranks candidate `k` at position
/// `k`: candidate `k` scores `n_cand - k`.
pub fn ranked_scores(n_query: usize, n_cand: usize) -> Mat<f64> {
    let row: Vec<f64> = (0..n_cand).map(|k| (n_cand - k) as f64).collect();
    Mat::from_vec(n_query, n_cand, row.repeat(n_query))
}

/// Positive candidate per query so that, over 1000 queries against 12
/// ranked candidates, Recall@{1,5,10} equal the given percentages (one
/// decimal). Positives sit at ranks 0, 1, 5 and 11.
pub fn positives_for(r1: f64, r5: f64, r10: f64) -> Vec<usize> {
    let n = |x: f64| (x * 10.0).round() as usize;
    let (a, b, c) = (n(r1), n(r5), n(r10));
    let mut out = vec![0; a];
    out.resize(b, 1);
    out.resize(c, 5);
    out.resize(1000, 11);
    out
}

/// Twelve one-hot single-token image items and 1000 identical text items
/// proportional to (12, 11, …, 1), so every text ranks image `k` at `k`.
pub fn mr_fixture_files(dir: &Path) -> (PathBuf, PathBuf) {
    let images: Vec<EmbeddingSet<f32>> = (0..12)
        .map(|k| {
            let mut v = vec![0f32; 12];
            v[k] = 1.0;
            EmbeddingSet::dense(Mat::from_vec(1, 12, v), EmbeddingKind::Image)
        })
        .collect();
    let t: Vec<f32> = (0..12).map(|k| (12 - k) as f32).collect();
    let texts: Vec<EmbeddingSet<f32>> = (0..1000)
        .map(|_| EmbeddingSet::dense(Mat::from_vec(1, 12, t.clone()), EmbeddingKind::Text))
        .collect();
    let ip = dir.join("mr_images.wkeb");
    let tp = dir.join("mr_texts.wkeb");
    EmbeddingFile::from_sets(&images).unwrap().save(&ip).unwrap();
    EmbeddingFile::from_sets(&texts).unwrap().save(&tp).unwrap();
    (ip, tp)
}

/// Ground truth JSONL mapping text `j` to image `positives[j]`.
pub fn gt_lines(positives: &[usize]) -> String {
    positives
        .iter()
        .enumerate()
        .map(|(j, &i)| format!("{{\"query_id\":\"{j}\",\"positives\":[\"{i}\"]}}\n"))
        .collect()
}

pub const FILTER_NAMES: &str = "张伟\n";
pub const FILTER_SENSITIVE: &str = "# test list\n赌博\n";

/// 31 and 32 CJK characters.
pub const CJK31: &str = "今天天气很好我们一起去公园散步然后去吃饭晚上看电影非常开心快乐";
pub const CJK32: &str = "今天天气很好我们一起去公园散步然后去吃饭晚上看电影非常开心快乐啊";

/// Twelve hand-built records, one per rule boundary. Record r09 carries a
/// caption that occurs eleven times, so it is written as eleven lines.
/// Run with `keyword_cap = 2` and the lexicons above.
pub fn golden_input() -> String {
    let mut lines = vec![
        format!(r#"{{"id":"r01","caption":"{CJK31}","width":300,"height":250,"keyword":"运动"}}"#),
        r#"{"id":"r02","caption":"小狗在跑","width":200,"height":400}"#.to_string(),
        r#"{"id":"r03","caption":"天空的云","width":201,"height":201,"lang":"zh"}"#.to_string(),
        r#"{"id":"r04","caption":"长城风景","width":650,"height":210}"#.to_string(),
        r#"{"id":"r05","caption":"hello world","width":300,"height":300}"#.to_string(),
        format!(r#"{{"id":"r06","caption":"{CJK32}","width":300,"height":300}}"#),
        r#"{"id":"r07","caption":"000.jpg","width":300,"height":300}"#.to_string(),
        r#"{"caption":"张伟在公园","id":"r08","url":"http://example.com/8.jpg","width":400,"height":300}"#.to_string(),
    ];
    for k in 1..=6 {
        lines.push(format!(
            r#"{{"id":"r09-{k:02}","caption":"查看源网页","width":300,"height":300}}"#
        ));
    }
    lines.push(r#"{"id":"r10","caption":"网上赌博平台","width":300,"height":300}"#.into());
    for k in 7..=11 {
        lines.push(format!(
            r#"{{"id":"r09-{k:02}","caption":" 查看源网页 ","width":300,"height":300}}"#
        ));
    }
    lines.push(
        r#"{"id":"r11","caption":"运动会开幕","width":500,"height":400,"keyword":"运动"}"#.into(),
    );
    lines.push(
        r#"{"id":"r12","caption":"运动员跑步","width":500,"height":400,"keyword":"运动"}"#.into(),
    );
    lines.join("\n") + "\n"
}

pub fn golden_kept() -> String {
    [
        format!(r#"{{"id":"r01","caption":"{CJK31}","width":300,"height":250,"keyword":"运动"}}"#),
        r#"{"id":"r03","caption":"天空的云","width":201,"height":201,"lang":"zh"}"#.to_string(),
        r#"{"id":"r08","url":"http://example.com/8.jpg","caption":"〈人名〉在公园","width":400,"height":300}"#.to_string(),
        r#"{"id":"r11","caption":"运动会开幕","width":500,"height":400,"keyword":"运动"}"#.to_string(),
    ]
    .join("\n")
        + "\n"
}

pub fn golden_rejects() -> String {
    let freq = |k: usize| {
        format!(r#"{{"id":"r09-{k:02}","stage":"frequency","reason":"caption occurs 11 times (limit 10)"}}"#)
    };
    let mut lines = vec![
        r#"{"id":"r02","stage":"image_size","reason":"200x400: both dimensions must exceed 200"}"#.to_string(),
        r#"{"id":"r04","stage":"image_aspect","reason":"aspect ratio 3.095 exceeds 3"}"#.to_string(),
        r#"{"id":"r05","stage":"cjk_count","reason":"0 CJK characters, need [1, 32)"}"#.to_string(),
        r#"{"id":"r06","stage":"cjk_count","reason":"32 CJK characters, need [1, 32)"}"#.to_string(),
        r#"{"id":"r07","stage":"meaningless","reason":"caption is a file name or has no words"}"#.to_string(),
    ];
    lines.extend((1..=6).map(freq));
    lines.push(
        r#"{"id":"r10","stage":"sensitive","reason":"contains sensitive word \"赌博\""}"#.into(),
    );
    lines.extend((7..=11).map(freq));
    lines.push(
        r#"{"id":"r12","stage":"keyword_cap","reason":"keyword \"运动\" already has 2 kept pairs"}"#
            .into(),
    );
    lines.join("\n") + "\n"
}

/// Writes the golden fixture and lexicons into `dir`.
pub fn write_golden(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let input = dir.join("golden.jsonl");
    let names = dir.join("names.txt");
    let sensitive = dir.join("sensitive.txt");
    std::fs::write(&input, golden_input()).unwrap();
    std::fs::write(&names, FILTER_NAMES).unwrap();
    std::fs::write(&sensitive, FILTER_SENSITIVE).unwrap();
    (input, names, sensitive)
}

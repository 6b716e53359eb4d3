use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

/// The 80 Chinese prompt templates shipped with the crate.
pub const DEFAULT_PROMPTS: &str = include_str!("../../data/prompts_zh.txt");

pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(Error::Data("prompt set is empty".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::Data(format!(
                    "prompt {} ({t:?}) has {n} placeholders, expected 1",
                    i + 1
                )));
            }
        }
        Ok(Self { templates })
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_zh() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("bundled prompts are valid")
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(&self, class_name: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(PLACEHOLDER, class_name, 1))
            .collect()
    }
}

/// Reads one class name per non-blank line.
pub fn load_class_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no class names", path.display())));
    }
    Ok(names)
}

fn normalize<T: Real>(v: &mut [T]) -> Result<()> {
    let n = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::ZeroNorm { row: 0 });
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    Ok(())
}

/// Prompt-ensemble class embeddings: every filled template is encoded and
/// normalized, the results are averaged, and the mean is normalized again.
pub fn class_embeddings<T: Real, F>(
    class_names: &[String],
    prompts: &PromptSet,
    mut encode: F,
) -> Result<Mat<T>>
where
    F: FnMut(&str) -> Result<Vec<T>>,
{
    if class_names.is_empty() {
        return Err(Error::Data("no class names".into()));
    }
    let mut rows = Vec::with_capacity(class_names.len());
    for name in class_names {
        let mut acc: Option<Vec<T>> = None;
        for text in prompts.fill(name) {
            let mut e = encode(&text)?;
            normalize(&mut e)?;
            match &mut acc {
                None => acc = Some(e),
                Some(a) => {
                    if a.len() != e.len() {
                        return Err(Error::Shape("encoder output width changed".into()));
                    }
                    a.iter_mut().zip(&e).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
        let mut mean = acc.expect("prompt set is non-empty");
        normalize(&mut mean)?;
        rows.push(mean);
    }
    Ok(Mat::from_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_prompts() {
        let p = PromptSet::default_zh();
        assert_eq!(p.templates().len(), 80);
        assert_eq!(p.fill("猫")[0], "猫的照片。");
    }

    #[test]
    fn placeholder_count_enforced() {
        assert!(PromptSet::new(["a photo"]).is_err());
        assert!(PromptSet::new(["{} and {}"]).is_err());
        assert!(PromptSet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn ensemble_rules() {
        let names = vec!["x".to_string()];
        let single = PromptSet::new(["{}"]).unwrap();
        let m = class_embeddings(&names, &single, |_| Ok(vec![3.0f64, 4.0])).unwrap();
        assert_eq!(m.row(0), &[0.6, 0.8]);

        let two = PromptSet::new(["a{}", "b{}"]).unwrap();
        let enc = |t: &str| Ok(if t.starts_with('a') { vec![2.0f64, 0.0] } else { vec![0.0, 5.0] });
        let m = class_embeddings(&names, &two, enc).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((m.at(0, 0) - h).abs() < 1e-12 && (m.at(0, 1) - h).abs() < 1e-12);

        let dup = PromptSet::new(["a{}", "b{}", "a{}", "b{}"]).unwrap();
        let m2 = class_embeddings(&names, &dup, enc).unwrap();
        assert!((m2.at(0, 0) - m.at(0, 0)).abs() < 1e-15);
    }
}

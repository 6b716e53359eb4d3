use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One raw ⟨image metadata, caption⟩ pair. Pixel data is never touched;
/// width and height come from crawl metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextRecord {
    pub id: String,
    pub url: Option<String>,
    pub caption: String,
    pub width: u32,
    pub height: u32,
    /// Search query the pair was retrieved with.
    pub keyword: Option<String>,
    /// Unknown fields, carried through in their original order.
    pub extra: Map<String, Value>,
}

const KNOWN: [&str; 6] = ["id", "url", "caption", "width", "height", "keyword"];

impl ImageTextRecord {
    pub fn new(id: impl Into<String>, caption: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            url: None,
            caption: caption.into(),
            width,
            height,
            keyword: None,
            extra: Map::new(),
        }
    }

    pub fn with_keyword(mut self, keyword: impl Into<String>) -> Self {
        self.keyword = Some(keyword.into());
        self
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = Some(url.into());
        self
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line)?;
        let Value::Object(mut obj) = value else {
            return Err(Error::Data("record is not a JSON object".into()));
        };

        let id = match obj.remove("id") {
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(Error::Data(format!("id must be a string, got {other}"))),
            None => return Err(Error::Data("missing field id".into())),
        };
        let caption = match obj.remove("caption") {
            Some(Value::String(s)) => s,
            _ => return Err(Error::Data(format!("record {id}: missing string field caption"))),
        };
        let dim = |obj: &mut Map<String, Value>, key: &str| -> Result<u32> {
            match obj.remove(key).as_ref().and_then(Value::as_u64) {
                Some(v) if v >= 1 && v <= u32::MAX as u64 => Ok(v as u32),
                _ => Err(Error::Data(format!(
                    "record {id}: {key} must be a positive integer"
                ))),
            }
        };
        let width = dim(&mut obj, "width")?;
        let height = dim(&mut obj, "height")?;
        let opt_string = |obj: &mut Map<String, Value>, key: &str| -> Result<Option<String>> {
            match obj.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(other) => Err(Error::Data(format!(
                    "record {id}: {key} must be a string, got {other}"
                ))),
            }
        };
        let url = opt_string(&mut obj, "url")?;
        let keyword = opt_string(&mut obj, "keyword")?;

        debug_assert!(KNOWN.iter().all(|k| !obj.contains_key(*k)));
        Ok(Self {
            id,
            url,
            caption,
            width,
            height,
            keyword,
            extra: obj,
        })
    }

    /// Canonical serialization: known fields first, then unknown fields in
    /// their original order.
    pub fn to_json_line(&self) -> String {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        if let Some(url) = &self.url {
            obj.insert("url".into(), Value::String(url.clone()));
        }
        obj.insert("caption".into(), Value::String(self.caption.clone()));
        obj.insert("width".into(), Value::from(self.width));
        obj.insert("height".into(), Value::from(self.height));
        if let Some(k) = &self.keyword {
            obj.insert("keyword".into(), Value::String(k.clone()));
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        Value::Object(obj).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStage {
    ImageSize,
    ImageAspect,
    CjkCount,
    Meaningless,
    Frequency,
    Sensitive,
    KeywordCap,
}

impl RejectStage {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectStage::ImageSize => "image_size",
            RejectStage::ImageAspect => "image_aspect",
            RejectStage::CjkCount => "cjk_count",
            RejectStage::Meaningless => "meaningless",
            RejectStage::Frequency => "frequency",
            RejectStage::Sensitive => "sensitive",
            RejectStage::KeywordCap => "keyword_cap",
        }
    }

    pub const ALL: [RejectStage; 7] = [
        RejectStage::ImageSize,
        RejectStage::ImageAspect,
        RejectStage::Meaningless,
        RejectStage::CjkCount,
        RejectStage::Frequency,
        RejectStage::Sensitive,
        RejectStage::KeywordCap,
    ];
}

/// One line of the rejection log. `stage` is `None` for records that could
/// not be parsed at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionLogEntry {
    pub id: String,
    pub stage: Option<RejectStage>,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"caption":"猫","id":"a1","width":300,"height":250,"lang":"zh","meta":{"x":[1,2]}}"#;
        let r = ImageTextRecord::from_json_line(line).unwrap();
        assert_eq!(r.extra.len(), 2);
        let out = r.to_json_line();
        assert_eq!(
            out,
            r#"{"id":"a1","caption":"猫","width":300,"height":250,"lang":"zh","meta":{"x":[1,2]}}"#
        );
        assert_eq!(ImageTextRecord::from_json_line(&out).unwrap(), r);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(ImageTextRecord::from_json_line(r#"{"id":"x","caption":"c","width":0,"height":5}"#).is_err());
        assert!(ImageTextRecord::from_json_line(r#"{"id":"x","caption":"c","width":5}"#).is_err());
        assert!(ImageTextRecord::from_json_line("not json").is_err());
    }
}

//! Recipe1M `layer1`-style JSON: an array of records
//! `{id, title, ingredients: [{text}], instructions: [{text}], partition}`.
//! Written corpora add `image_key` and, when known, `planted_tree` and
//! `parsed_tree` as adjacency bit strings.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::vocab::{split_words, TokenizerConfig};
use super::{Partition, RecipeSample};
use crate::error::{Result, SgnError};
use crate::treekit::{decode_vector, encode_tree, AdjacencyVector, SentenceTree};

pub fn load_recipe1m(path: &Path, min_sentences: usize) -> Result<Vec<RecipeSample>> {
    let bytes = std::fs::read(path)?;
    parse_recipe1m(&bytes, min_sentences, TokenizerConfig::default())
}

/// Reads a corpus written by [`write_corpus`] without filtering.
pub fn read_corpus(path: &Path) -> Result<Vec<RecipeSample>> {
    load_recipe1m(path, 1)
}

/// Parses records and keeps those with at least `min_sentences` non-empty
/// instructions. Each instruction element is one sentence.
pub fn parse_recipe1m(bytes: &[u8], min_sentences: usize, tokenizer: TokenizerConfig) -> Result<Vec<RecipeSample>> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| SgnError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let records = doc
        .as_array()
        .ok_or_else(|| SgnError::Schema { record: "<root>".into(), message: "expected a JSON array".into() })?;
    let mut out = Vec::new();
    for (pos, rec) in records.iter().enumerate() {
        let sample = parse_record(rec, pos, tokenizer)?;
        if sample.instructions.len() >= min_sentences.max(1) {
            out.push(sample);
        }
    }
    Ok(out)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for _ in 1..line {
        match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => return bytes.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

fn parse_record(rec: &Value, pos: usize, tokenizer: TokenizerConfig) -> Result<RecipeSample> {
    let id = rec.get("id").and_then(Value::as_str).map(str::to_string);
    let record = id.clone().unwrap_or_else(|| format!("#{pos}"));
    let schema = |message: String| SgnError::Schema { record: record.clone(), message };
    let id = id.ok_or_else(|| schema("missing string field \"id\"".into()))?;
    let str_field = |name: &str| {
        rec.get(name).and_then(Value::as_str).ok_or_else(|| schema(format!("missing string field {name:?}")))
    };
    let title = str_field("title")?.to_string();
    let partition: Partition = str_field("partition")?.parse().map_err(schema)?;
    let texts = |name: &str| -> Result<Vec<Vec<String>>> {
        let items = rec
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| schema(format!("missing array field {name:?}")))?;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let text = item
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("{name} entry without a \"text\" string")))?;
            let words = split_words(text, tokenizer);
            if !words.is_empty() {
                out.push(words);
            }
        }
        Ok(out)
    };
    let ingredients = texts("ingredients")?;
    let instructions = texts("instructions")?;
    let image_key = match rec.get("image_key") {
        Some(v) => v.as_str().ok_or_else(|| schema("\"image_key\" is not a string".into()))?.to_string(),
        None => id.clone(),
    };
    let tree = |name: &str| -> Result<Option<SentenceTree>> {
        let Some(v) = rec.get(name) else { return Ok(None) };
        let bits = v.as_str().ok_or_else(|| schema(format!("{name:?} is not a bit string")))?;
        let tree = decode_vector(&AdjacencyVector::parse_bit_string(bits).map_err(|e| schema(e.to_string()))?);
        if tree.leaf_count() != instructions.len() {
            return Err(schema(format!(
                "{name} has {} leaves for {} sentences",
                tree.leaf_count(),
                instructions.len()
            )));
        }
        Ok(Some(tree))
    };
    let planted_tree = tree("planted_tree")?;
    let parsed_tree = tree("parsed_tree")?;
    Ok(RecipeSample { id, title, ingredients, instructions, partition, image_key, planted_tree, parsed_tree })
}

#[derive(Serialize)]
struct TextEntry {
    text: String,
}

#[derive(Serialize)]
struct Record<'a> {
    id: &'a str,
    title: &'a str,
    partition: &'a str,
    image_key: &'a str,
    ingredients: Vec<TextEntry>,
    instructions: Vec<TextEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_tree: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parsed_tree: Option<String>,
}

pub fn recipes_to_json(samples: &[RecipeSample]) -> String {
    let entries = |seqs: &[Vec<String>]| seqs.iter().map(|w| TextEntry { text: w.join(" ") }).collect();
    let records: Vec<Record> = samples
        .iter()
        .map(|s| Record {
            id: &s.id,
            title: &s.title,
            partition: s.partition.as_str(),
            image_key: &s.image_key,
            ingredients: entries(&s.ingredients),
            instructions: entries(&s.instructions),
            planted_tree: s.planted_tree.as_ref().map(|t| encode_tree(t).to_bit_string()),
            parsed_tree: s.parsed_tree.as_ref().map(|t| encode_tree(t).to_bit_string()),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("records serialize")
}

pub fn write_corpus(samples: &[RecipeSample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, recipes_to_json(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, n: usize) -> String {
        let steps: Vec<String> = (0..n).map(|i| format!("{{\"text\": \"Step number {i}.\"}}")).collect();
        format!(
            "{{\"id\": \"{id}\", \"title\": \"T\", \"partition\": \"train\", \"ingredients\": [{{\"text\": \"1 cup rice\"}}], \"instructions\": [{}]}}",
            steps.join(", ")
        )
    }

    #[test]
    fn filters_short_recipes() {
        let doc = format!("[{}, {}]", record("a", 3), record("b", 4));
        let got = parse_recipe1m(doc.as_bytes(), 4, TokenizerConfig::default()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "b");
        assert_eq!(got[0].instructions[0], ["step", "number", "0", "."]);
        assert_eq!(got[0].image_key, "b");
    }

    #[test]
    fn empty_array_gives_no_samples() {
        assert!(parse_recipe1m(b"[]", 4, TokenizerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let doc = b"[\n  {\"id\": \"a\",, }\n]";
        match parse_recipe1m(doc, 1, TokenizerConfig::default()) {
            Err(SgnError::Parse { offset, .. }) => assert_eq!(offset, 15),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_the_record() {
        let doc = r#"[{"id": "r17", "title": "x", "partition": "train", "ingredients": []}]"#;
        match parse_recipe1m(doc.as_bytes(), 1, TokenizerConfig::default()) {
            Err(SgnError::Schema { record, message }) => {
                assert_eq!(record, "r17");
                assert!(message.contains("instructions"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}

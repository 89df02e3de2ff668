use std::fs;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub paragraphs: Vec<String>,
}

impl Document {
    /// Split raw text on blank lines; lines inside a paragraph are joined
    /// with single spaces.
    pub fn from_text(id: impl Into<String>, text: &str) -> Self {
        let mut paragraphs = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    paragraphs.push(current.join(" "));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            paragraphs.push(current.join(" "));
        }
        Document {
            id: id.into(),
            paragraphs,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.paragraphs.join("\n\n");
        s.push('\n');
        s
    }
}

/// A directory of `.txt` documents, kept sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentCollection {
    pub documents: Vec<Document>,
}

impl DocumentCollection {
    pub fn new(mut documents: Vec<Document>) -> Self {
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        DocumentCollection { documents }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Read every `*.txt` file in `dir`; the file stem is the document id.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut documents = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            documents.push(Document::from_text(id, &fs::read_to_string(&path)?));
        }
        Ok(DocumentCollection::new(documents))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for doc in &self.documents {
            fs::write(dir.join(format!("{}.txt", doc.id)), doc.to_text())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraphs_split_on_blank_lines() {
        let doc = Document::from_text("d", "one\ntwo\n\n\nthree\n  \nfour");
        assert_eq!(doc.paragraphs, ["one two", "three", "four"]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = DocumentCollection::new(vec![
            Document::from_text("b", "x y\n\nz"),
            Document::from_text("a", "w"),
        ]);
        docs.save_dir(dir.path()).unwrap();
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let back = DocumentCollection::load_dir(dir.path()).unwrap();
        assert_eq!(back, docs);
        assert_eq!(back.documents[0].id, "a");
    }
}

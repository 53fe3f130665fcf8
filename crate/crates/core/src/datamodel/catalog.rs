use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    /// Dense position within the domain, assigned in file order.
    pub index: usize,
}

/// The items of one domain, indexed densely in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    pub domain: String,
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            ..Self::default()
        }
    }

    /// Append an item; returns its index. Duplicate ids are rejected.
    pub fn push(
        &mut self,
        item_id: impl Into<String>,
        title: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<usize> {
        let item_id = item_id.into();
        if self.by_id.contains_key(&item_id) {
            return Err(Error::Input(format!("duplicate item_id '{item_id}'")));
        }
        let index = self.items.len();
        self.by_id.insert(item_id.clone(), index);
        self.items.push(Item {
            item_id,
            title: title.into(),
            description: description.into(),
            index,
        });
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, index: usize) -> Option<&Item> {
        self.items.get(index)
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }
}

/// One user's chronologically ordered interactions within a domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub user_id: String,
    pub sequence: Vec<usize>,
    pub domain: String,
}

#[derive(Deserialize, Serialize)]
struct ItemRecord {
    item_id: String,
    title: String,
    #[serde(default)]
    description: String,
}

#[derive(Deserialize, Serialize)]
struct InteractionRecord {
    user_id: String,
    items: Vec<String>,
}

fn jsonl_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            line.map(|l| (i + 1, l))
                .map_err(|e| Error::io(owned.clone(), e))
        })
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

/// Read `items.jsonl`: one `{"item_id", "title", "description"}` per line.
pub fn load_items(path: &Path, domain: &str) -> Result<Catalog> {
    let mut catalog = Catalog::new(domain);
    for line in jsonl_lines(path)? {
        let (n, text) = line?;
        let rec: ItemRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n,
            msg: e.to_string(),
        })?;
        catalog
            .push(rec.item_id, rec.title, rec.description)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n,
                msg: e.to_string(),
            })?;
    }
    Ok(catalog)
}

/// Read `interactions.jsonl`: one `{"user_id", "items": [...]}` per line, items
/// in chronological order and resolved against `catalog`.
pub fn load_interactions(path: &Path, catalog: &Catalog) -> Result<Vec<InteractionLog>> {
    let mut logs = Vec::new();
    for line in jsonl_lines(path)? {
        let (n, text) = line?;
        let rec: InteractionRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n,
            msg: e.to_string(),
        })?;
        let sequence = rec
            .items
            .iter()
            .map(|id| {
                catalog.index_of(id).ok_or_else(|| Error::Reference {
                    item_id: id.clone(),
                    user_id: rec.user_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        logs.push(InteractionLog {
            user_id: rec.user_id,
            sequence,
            domain: catalog.domain.clone(),
        });
    }
    Ok(logs)
}

pub fn write_items(path: &Path, catalog: &Catalog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in catalog.items() {
        let rec = ItemRecord {
            item_id: it.item_id.clone(),
            title: it.title.clone(),
            description: it.description.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_interactions(path: &Path, logs: &[InteractionLog], catalog: &Catalog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for log in logs {
        let items = log
            .sequence
            .iter()
            .map(|&i| {
                catalog
                    .get(i)
                    .map(|it| it.item_id.clone())
                    .ok_or_else(|| Error::Input(format!("item index {i} not in catalog")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = InteractionRecord {
            user_id: log.user_id.clone(),
            items,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

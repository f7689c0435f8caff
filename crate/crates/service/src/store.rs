//! Single-file key-value store for personas, tokens, media and jobs.

use std::path::Path;

use pimap::encoder::MediaDescriptor;
use pimap::trainer::PersonaToken;
use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

const PERSONAS: TableDefinition<&str, &[u8]> = TableDefinition::new("personas");
const TOKENS: TableDefinition<&str, &[u8]> = TableDefinition::new("tokens");
const MEDIA: TableDefinition<&str, &[u8]> = TableDefinition::new("media");
const JOBS: TableDefinition<&str, &[u8]> = TableDefinition::new("jobs");
const META: TableDefinition<&str, u64> = TableDefinition::new("meta");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaStatus {
    Untrained,
    Queued,
    Training,
    Trained,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaRecord {
    /// Also the `@mention` name.
    pub id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Template media ids.
    pub templates: Vec<String>,
    pub status: PersonaStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_job: Option<String>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRecord {
    pub media_id: String,
    pub descriptor: MediaDescriptor,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub labels: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Personalize,
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    /// Persona id for personalization jobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    /// Media ids an index job adds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub media: Vec<String>,
    pub state: JobState,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

pub struct Store {
    db: Database,
}

fn db_err(e: impl Into<redb::Error>) -> ServiceError {
    ServiceError::internal(format!("store: {}", e.into()))
}

fn decode<T: DeserializeOwned>(bytes: &[u8]) -> ServiceResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::internal(format!("store record: {e}")))
}

impl Store {
    pub fn open(path: &Path) -> ServiceResult<Self> {
        let db = Database::create(path).map_err(db_err)?;
        let txn = db.begin_write().map_err(db_err)?;
        for t in [PERSONAS, TOKENS, MEDIA, JOBS] {
            txn.open_table(t).map_err(db_err)?;
        }
        txn.open_table(META).map_err(db_err)?;
        txn.commit().map_err(db_err)?;
        Ok(Self { db })
    }

    fn get_raw(&self, table: TableDefinition<&str, &[u8]>, key: &str) -> ServiceResult<Option<Vec<u8>>> {
        let txn = self.db.begin_read().map_err(db_err)?;
        let t = txn.open_table(table).map_err(db_err)?;
        Ok(t.get(key).map_err(db_err)?.map(|v| v.value().to_vec()))
    }

    fn put_raw(&self, table: TableDefinition<&str, &[u8]>, key: &str, value: &[u8]) -> ServiceResult<()> {
        let txn = self.db.begin_write().map_err(db_err)?;
        txn.open_table(table).map_err(db_err)?.insert(key, value).map_err(db_err)?;
        txn.commit().map_err(db_err)
    }

    fn list<T: DeserializeOwned>(&self, table: TableDefinition<&str, &[u8]>) -> ServiceResult<Vec<T>> {
        let txn = self.db.begin_read().map_err(db_err)?;
        let t = txn.open_table(table).map_err(db_err)?;
        let mut out = Vec::new();
        for row in t.iter().map_err(db_err)? {
            let (_, v) = row.map_err(db_err)?;
            out.push(decode(v.value())?);
        }
        Ok(out)
    }

    /// Inserts a new persona; false when the id is taken.
    pub fn insert_persona(&self, p: &PersonaRecord) -> ServiceResult<bool> {
        let txn = self.db.begin_write().map_err(db_err)?;
        {
            let mut t = txn.open_table(PERSONAS).map_err(db_err)?;
            if t.get(p.id.as_str()).map_err(db_err)?.is_some() {
                return Ok(false);
            }
            let bytes = serde_json::to_vec(p).map_err(|e| ServiceError::internal(e.to_string()))?;
            t.insert(p.id.as_str(), bytes.as_slice()).map_err(db_err)?;
        }
        txn.commit().map_err(db_err)?;
        Ok(true)
    }

    pub fn persona(&self, id: &str) -> ServiceResult<Option<PersonaRecord>> {
        self.get_raw(PERSONAS, id)?.map(|b| decode(&b)).transpose()
    }

    pub fn put_persona(&self, p: &PersonaRecord) -> ServiceResult<()> {
        self.put_raw(PERSONAS, &p.id, &serde_json::to_vec(p).expect("persona serializes"))
    }

    /// Read-modify-write of one persona inside a single transaction.
    pub fn update_persona<R>(&self, id: &str, f: impl FnOnce(&mut PersonaRecord) -> ServiceResult<R>) -> ServiceResult<Option<R>> {
        let txn = self.db.begin_write().map_err(db_err)?;
        let r = {
            let mut t = txn.open_table(PERSONAS).map_err(db_err)?;
            let current: Option<PersonaRecord> = t.get(id).map_err(db_err)?.map(|v| decode(v.value())).transpose()?;
            let Some(mut p) = current else {
                return Ok(None);
            };
            let r = f(&mut p)?;
            t.insert(id, serde_json::to_vec(&p).expect("persona serializes").as_slice())
                .map_err(db_err)?;
            r
        };
        txn.commit().map_err(db_err)?;
        Ok(Some(r))
    }

    pub fn personas(&self) -> ServiceResult<Vec<PersonaRecord>> {
        self.list(PERSONAS)
    }

    pub fn token(&self, persona: &str) -> ServiceResult<Option<PersonaToken>> {
        self.get_raw(TOKENS, persona)?
            .map(|b| PersonaToken::from_bytes(&b, Path::new(persona)).map_err(ServiceError::from))
            .transpose()
    }

    pub fn put_token(&self, persona: &str, token: &PersonaToken) -> ServiceResult<()> {
        self.put_raw(TOKENS, persona, &token.to_bytes())
    }

    pub fn media(&self, id: &str) -> ServiceResult<Option<MediaRecord>> {
        self.get_raw(MEDIA, id)?.map(|b| decode(&b)).transpose()
    }

    pub fn put_media(&self, m: &MediaRecord) -> ServiceResult<()> {
        self.put_raw(MEDIA, &m.media_id, &serde_json::to_vec(m).expect("media serializes"))
    }

    pub fn job(&self, id: &str) -> ServiceResult<Option<JobRecord>> {
        self.get_raw(JOBS, id)?.map(|b| decode(&b)).transpose()
    }

    pub fn put_job(&self, j: &JobRecord) -> ServiceResult<()> {
        self.put_raw(JOBS, &j.job_id, &serde_json::to_vec(j).expect("job serializes"))
    }

    pub fn jobs(&self) -> ServiceResult<Vec<JobRecord>> {
        self.list(JOBS)
    }

    /// Next value of a persistent counter.
    pub fn next_id(&self, counter: &str) -> ServiceResult<u64> {
        let txn = self.db.begin_write().map_err(db_err)?;
        let n = {
            let mut t = txn.open_table(META).map_err(db_err)?;
            let n = t.get(counter).map_err(db_err)?.map_or(0, |v| v.value()) + 1;
            t.insert(counter, n).map_err(db_err)?;
            n
        };
        txn.commit().map_err(db_err)?;
        Ok(n)
    }
}

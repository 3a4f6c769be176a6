//! Persistence: a SQLite job table with an append-only status event log, and a
//! content-addressed blob directory.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use rusqlite::{params, Connection, OptionalExtension};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::job::{blob_uri, now_ms, EditJob, EditRequest, JobStatus, Provenance, Timings};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS jobs (
    id TEXT PRIMARY KEY,
    status TEXT NOT NULL,
    request TEXT NOT NULL,
    outputs TEXT NOT NULL DEFAULT '[]',
    provenance TEXT,
    error TEXT,
    queued_at INTEGER NOT NULL,
    started_at INTEGER,
    finished_at INTEGER
);
CREATE TABLE IF NOT EXISTS job_events (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    job_id TEXT NOT NULL REFERENCES jobs(id),
    status TEXT NOT NULL,
    at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS job_events_by_job ON job_events(job_id, seq);
";

pub struct JobStore {
    conn: Mutex<Connection>,
}

impl JobStore {
    pub fn open(path: &Path) -> Result<Self> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create(&self, request: &EditRequest) -> Result<String> {
        let id = uuid::Uuid::new_v4().to_string();
        let now = now_ms() as i64;
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO jobs (id, status, request, queued_at) VALUES (?1, ?2, ?3, ?4)",
            params![id, JobStatus::Queued.as_str(), serde_json::to_string(request)?, now],
        )?;
        tx.execute(
            "INSERT INTO job_events (job_id, status, at) VALUES (?1, ?2, ?3)",
            params![id, JobStatus::Queued.as_str(), now],
        )?;
        tx.commit()?;
        Ok(id)
    }

    fn current_status(tx: &rusqlite::Transaction<'_>, id: &str) -> Result<JobStatus> {
        let s: Option<String> = tx
            .query_row("SELECT status FROM jobs WHERE id = ?1", [id], |r| r.get(0))
            .optional()?;
        let s = s.ok_or_else(|| ServiceError::not_found("unknown_job", id.to_string()))?;
        JobStatus::parse(&s).ok_or_else(|| ServiceError::State(format!("stored status {s:?}")))
    }

    fn transition(&self, id: &str, next: JobStatus, update: impl FnOnce(&rusqlite::Transaction<'_>, i64) -> Result<()>) -> Result<()> {
        let now = now_ms() as i64;
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let current = Self::current_status(&tx, id)?;
        if !current.can_move_to(next) {
            return Err(ServiceError::State(format!("{id}: {current:?} -> {next:?}")));
        }
        tx.execute("UPDATE jobs SET status = ?2 WHERE id = ?1", params![id, next.as_str()])?;
        tx.execute(
            "INSERT INTO job_events (job_id, status, at) VALUES (?1, ?2, ?3)",
            params![id, next.as_str(), now],
        )?;
        update(&tx, now)?;
        tx.commit()?;
        Ok(())
    }

    pub fn mark_running(&self, id: &str) -> Result<()> {
        self.transition(id, JobStatus::Running, |tx, now| {
            tx.execute("UPDATE jobs SET started_at = ?2 WHERE id = ?1", params![id, now])?;
            Ok(())
        })
    }

    pub fn mark_done(&self, id: &str, outputs: &[String], provenance: &Provenance) -> Result<()> {
        let outputs = serde_json::to_string(outputs)?;
        let provenance = serde_json::to_string(provenance)?;
        self.transition(id, JobStatus::Done, |tx, now| {
            tx.execute(
                "UPDATE jobs SET outputs = ?2, provenance = ?3, finished_at = ?4 WHERE id = ?1",
                params![id, outputs, provenance, now],
            )?;
            Ok(())
        })
    }

    pub fn mark_failed(&self, id: &str, error: &str) -> Result<()> {
        self.transition(id, JobStatus::Failed, |tx, now| {
            tx.execute(
                "UPDATE jobs SET error = ?2, finished_at = ?3 WHERE id = ?1",
                params![id, error, now],
            )?;
            Ok(())
        })
    }

    pub fn get(&self, id: &str) -> Result<EditJob> {
        let conn = self.conn();
        let row = conn
            .query_row(
                "SELECT status, request, outputs, provenance, error, queued_at, started_at, finished_at
                 FROM jobs WHERE id = ?1",
                [id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, String>(2)?,
                        r.get::<_, Option<String>>(3)?,
                        r.get::<_, Option<String>>(4)?,
                        r.get::<_, i64>(5)?,
                        r.get::<_, Option<i64>>(6)?,
                        r.get::<_, Option<i64>>(7)?,
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| ServiceError::not_found("unknown_job", format!("no job {id}")))?;
        let (status, request, outputs, provenance, error, queued, started, finished) = row;
        let outputs: Vec<String> = serde_json::from_str(&outputs)?;
        Ok(EditJob {
            job_id: id.to_string(),
            status: JobStatus::parse(&status).ok_or_else(|| ServiceError::State(format!("stored status {status:?}")))?,
            request: serde_json::from_str(&request)?,
            outputs: outputs.iter().map(|h| blob_uri(h)).collect(),
            provenance: provenance.map(|p| serde_json::from_str(&p)).transpose()?,
            error,
            timings: Timings {
                queued_at_ms: queued as u64,
                started_at_ms: started.map(|t| t as u64),
                finished_at_ms: finished.map(|t| t as u64),
            },
        })
    }

    /// Status history of a job in the order it was written.
    pub fn events(&self, id: &str) -> Result<Vec<JobStatus>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT status FROM job_events WHERE job_id = ?1 ORDER BY seq")?;
        let rows = stmt.query_map([id], |r| r.get::<_, String>(0))?;
        rows.map(|s| {
            let s = s?;
            JobStatus::parse(&s).ok_or_else(|| ServiceError::State(format!("stored status {s:?}")))
        })
        .collect()
    }

    /// Jobs not yet finished, oldest first; used to re-enqueue after restart.
    pub fn unfinished(&self) -> Result<Vec<String>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT id FROM jobs WHERE status IN ('queued', 'running') ORDER BY queued_at")?;
        let ids = stmt.query_map([], |r| r.get::<_, String>(0))?;
        Ok(ids.collect::<rusqlite::Result<_>>()?)
    }
}

/// Files stored under the hex SHA-256 of their content.
pub struct BlobStore {
    root: PathBuf,
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2]).join(hash)
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.path(&hash);
        if !path.exists() {
            std::fs::create_dir_all(path.parent().expect("blob path has a parent"))?;
            let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if !is_hash(hash) {
            return Err(ServiceError::not_found("unknown_blob", hash.to_string()));
        }
        match std::fs::read(self.path(hash)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ServiceError::not_found("unknown_blob", hash.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

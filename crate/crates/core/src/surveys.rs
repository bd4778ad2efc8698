//! Survey templates, scheduled per-member assignments, anonymous response
//! identifiers and compliance reporting.
//!
//! An assignment's anonymous id is the first 128 bits of
//! `SHA-256(secret_salt || username || provider_url || open_time)` with the
//! open time rendered as RFC 3339 in UTC at millisecond precision. Responses
//! are keyed by that id alone and kept in a store separate from member
//! metadata, so linking a response to a member needs both stores.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::{format_ms, serde_ms, Timestamp};
use crate::error::{Error, Result};
use crate::ids::{AssignmentId, MemberId, TemplateId};
use crate::registry::{Member, SecretSalt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Event,
    Daily,
    Weekly,
    Monthly,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyTemplate {
    pub template_id: TemplateId,
    pub title: String,
    pub provider_url: String,
    pub cadence: Cadence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyAssignment {
    pub assignment_id: AssignmentId,
    pub member_id: MemberId,
    pub template_id: TemplateId,
    #[serde(with = "serde_ms")]
    pub open_time: Timestamp,
    #[serde(with = "serde_ms")]
    pub close_time: Timestamp,
    pub completed: bool,
    #[serde(default, with = "serde_ms::option")]
    pub completed_at: Option<Timestamp>,
    pub anonymous_id: String,
    /// Number of times the distribution link was queued.
    pub deliveries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymousResponse {
    pub anonymous_id: String,
    #[serde(with = "serde_ms")]
    pub received_at: Timestamp,
    pub payload: Value,
}

/// One queued notification. Serialized as one outbox line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboxEntry {
    #[serde(with = "serde_ms")]
    pub queued_at: Timestamp,
    pub email: String,
    pub link: String,
}

pub fn anonymous_id(salt: &SecretSalt, username: &str, provider_url: &str, open_time: &Timestamp) -> String {
    let digest = Sha256::new()
        .chain_update(salt.as_bytes())
        .chain_update(username.as_bytes())
        .chain_update(provider_url.as_bytes())
        .chain_update(format_ms(open_time).as_bytes())
        .finalize();
    hex::encode(&digest[..16])
}

/// Turns a provider URL and anonymous id into a distribution link.
pub trait SurveyProvider: Send + Sync {
    fn distribution_link(&self, provider_url: &str, anonymous_id: &str) -> String;
}

/// Appends the id as an `aid` query parameter. Also simulates participants
/// answering, for tests and the simulator.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Callback {
    pub anonymous_id: String,
    #[serde(with = "serde_ms")]
    pub received_at: Timestamp,
    pub payload: Value,
}

impl SurveyProvider for MockProvider {
    fn distribution_link(&self, provider_url: &str, anonymous_id: &str) -> String {
        let sep = if provider_url.contains('?') { '&' } else { '?' };
        format!("{provider_url}{sep}aid={anonymous_id}")
    }
}

impl MockProvider {
    /// Extracts the anonymous id from a link this provider produced.
    pub fn id_from_link(link: &str) -> Option<&str> {
        link.rsplit_once("aid=").map(|(_, id)| id)
    }

    /// Completion callbacks for a random subset of assignments, each
    /// received at a uniformly random instant inside its window.
    pub fn simulate<R: Rng>(&self, assignments: &[SurveyAssignment], completion_rate: f64, rng: &mut R) -> Vec<Callback> {
        let rate = completion_rate.clamp(0.0, 1.0);
        let mut out = Vec::new();
        for a in assignments {
            if !rng.random_bool(rate) {
                continue;
            }
            let span = (a.close_time - a.open_time).num_milliseconds().max(1);
            let offset = rng.random_range(0..span);
            out.push(Callback {
                anonymous_id: a.anonymous_id.clone(),
                received_at: a.open_time + chrono::Duration::milliseconds(offset),
                payload: serde_json::json!({ "answers": [rng.random_range(1..=5)] }),
            });
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ComplianceFilter {
    #[serde(default)]
    pub member_id: Option<MemberId>,
    #[serde(default)]
    pub template_id: Option<TemplateId>,
    /// Assignments whose open time is in `[from, to)` count.
    #[serde(default, with = "serde_ms::option")]
    pub from: Option<Timestamp>,
    #[serde(default, with = "serde_ms::option")]
    pub to: Option<Timestamp>,
}

impl ComplianceFilter {
    fn admits(&self, a: &SurveyAssignment) -> bool {
        self.member_id.as_ref().is_none_or(|m| m == &a.member_id)
            && self.template_id.as_ref().is_none_or(|t| t == &a.template_id)
            && self.from.is_none_or(|f| a.open_time >= f)
            && self.to.is_none_or(|t| a.open_time < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRow {
    pub member_id: MemberId,
    pub username: String,
    pub assigned: u64,
    pub completed: u64,
    /// Absent when nothing was assigned.
    pub rate: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Surveys {
    templates: BTreeMap<TemplateId, SurveyTemplate>,
    assignments: BTreeMap<AssignmentId, SurveyAssignment>,
    #[serde(skip)]
    by_anon: HashMap<String, AssignmentId>,
}

impl Surveys {
    /// Rebuilds derived indexes after deserialization.
    pub fn reindex(&mut self) {
        self.by_anon =
            self.assignments.values().map(|a| (a.anonymous_id.clone(), a.assignment_id.clone())).collect();
    }

    pub fn add_template(&mut self, title: String, provider_url: String, cadence: Cadence) -> Result<SurveyTemplate> {
        if provider_url.trim().is_empty() {
            return Err(Error::InvalidArgument("provider_url must not be empty".into()));
        }
        let t = SurveyTemplate { template_id: TemplateId::generate(), title, provider_url, cadence };
        self.templates.insert(t.template_id.clone(), t.clone());
        Ok(t)
    }

    pub fn template(&self, id: &TemplateId) -> Result<&SurveyTemplate> {
        self.templates.get(id).ok_or_else(|| Error::not_found("survey_template", id.as_str()))
    }

    pub fn templates(&self) -> impl Iterator<Item = &SurveyTemplate> {
        self.templates.values()
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    pub fn assignment(&self, id: &AssignmentId) -> Result<&SurveyAssignment> {
        self.assignments.get(id).ok_or_else(|| Error::not_found("survey_assignment", id.as_str()))
    }

    pub fn assignments(&self) -> impl Iterator<Item = &SurveyAssignment> {
        self.assignments.values()
    }

    pub fn assignments_of<'a>(&'a self, member: &'a MemberId) -> impl Iterator<Item = &'a SurveyAssignment> + 'a {
        self.assignments.values().filter(move |a| &a.member_id == member)
    }

    pub fn schedule(
        &mut self,
        member: &Member,
        template_id: &TemplateId,
        open_time: Timestamp,
        close_time: Timestamp,
    ) -> Result<SurveyAssignment> {
        let template = self.template(template_id)?;
        if open_time >= close_time {
            return Err(Error::InvalidWindow("open_time must precede close_time".into()));
        }
        let taken = self
            .assignments
            .values()
            .any(|a| a.member_id == member.member_id && &a.template_id == template_id && a.open_time == open_time);
        if taken {
            return Err(Error::DuplicateAssignment);
        }
        let anon = anonymous_id(&member.secret_salt, &member.username, &template.provider_url, &open_time);
        let a = SurveyAssignment {
            assignment_id: AssignmentId::generate(),
            member_id: member.member_id.clone(),
            template_id: template_id.clone(),
            open_time,
            close_time,
            completed: false,
            completed_at: None,
            anonymous_id: anon.clone(),
            deliveries: 0,
        };
        self.by_anon.insert(anon, a.assignment_id.clone());
        self.assignments.insert(a.assignment_id.clone(), a.clone());
        Ok(a)
    }

    /// Marks the assignment behind `anonymous_id` complete. Exactly one
    /// caller can win: the check and the flag flip happen under `&mut self`.
    pub fn complete(&mut self, anonymous_id: &str, received_at: Timestamp, grace: chrono::Duration) -> Result<SurveyAssignment> {
        let id = self.by_anon.get(anonymous_id).ok_or(Error::UnknownId)?;
        let a = self.assignments.get_mut(id).ok_or(Error::UnknownId)?;
        if a.completed {
            return Err(Error::AlreadyCompleted);
        }
        if received_at < a.open_time {
            return Err(Error::WindowClosed(format!("survey opens at {}", format_ms(&a.open_time))));
        }
        if received_at > a.close_time + grace {
            return Err(Error::WindowClosed(format!("survey closed at {}", format_ms(&a.close_time))));
        }
        a.completed = true;
        a.completed_at = Some(received_at);
        Ok(a.clone())
    }

    /// Undoes a completion whose response could not be stored.
    pub(crate) fn revert_completion(&mut self, id: &AssignmentId) {
        if let Some(a) = self.assignments.get_mut(id) {
            a.completed = false;
            a.completed_at = None;
        }
    }

    pub fn extend(&mut self, id: &AssignmentId, new_close: Timestamp) -> Result<SurveyAssignment> {
        let a = self.assignments.get_mut(id).ok_or_else(|| Error::not_found("survey_assignment", id.as_str()))?;
        if new_close <= a.close_time {
            return Err(Error::InvalidWindow("new close time must be later than the current one".into()));
        }
        a.close_time = new_close;
        Ok(a.clone())
    }

    /// Checks an assignment can be resent at `now` and bumps its delivery
    /// counter.
    pub fn mark_redelivered(&mut self, id: &AssignmentId, now: Timestamp) -> Result<SurveyAssignment> {
        let a = self.assignments.get_mut(id).ok_or_else(|| Error::not_found("survey_assignment", id.as_str()))?;
        if a.completed {
            return Err(Error::AlreadyCompleted);
        }
        if now > a.close_time {
            return Err(Error::WindowClosed(format!("survey closed at {}", format_ms(&a.close_time))));
        }
        a.deliveries += 1;
        Ok(a.clone())
    }

    pub(crate) fn mark_delivered(&mut self, id: &AssignmentId) {
        if let Some(a) = self.assignments.get_mut(id) {
            a.deliveries += 1;
        }
    }

    /// Re-derives every anonymous id of `member` after a salt change.
    /// Responses already stored under the old ids stay where they are and
    /// no longer match any assignment.
    pub fn rekey_member(&mut self, member: &Member) {
        let templates = &self.templates;
        for a in self.assignments.values_mut().filter(|a| a.member_id == member.member_id) {
            let Some(t) = templates.get(&a.template_id) else { continue };
            self.by_anon.remove(&a.anonymous_id);
            a.anonymous_id = anonymous_id(&member.secret_salt, &member.username, &t.provider_url, &a.open_time);
            self.by_anon.insert(a.anonymous_id.clone(), a.assignment_id.clone());
        }
    }

    pub fn remove_member(&mut self, member: &MemberId) -> Vec<AssignmentId> {
        let ids: Vec<AssignmentId> =
            self.assignments.values().filter(|a| &a.member_id == member).map(|a| a.assignment_id.clone()).collect();
        for id in &ids {
            if let Some(a) = self.assignments.remove(id) {
                self.by_anon.remove(&a.anonymous_id);
            }
        }
        ids
    }

    /// One row per member in scope. `members` supplies usernames and the
    /// member universe.
    pub fn compliance<'a>(&self, members: impl Iterator<Item = &'a Member>, filter: &ComplianceFilter) -> Vec<ComplianceRow> {
        let mut counts: HashMap<&MemberId, (u64, u64)> = HashMap::new();
        for a in self.assignments.values().filter(|a| filter.admits(a)) {
            let c = counts.entry(&a.member_id).or_default();
            c.0 += 1;
            c.1 += u64::from(a.completed);
        }
        let mut rows: Vec<ComplianceRow> = members
            .filter(|m| filter.member_id.as_ref().is_none_or(|id| id == &m.member_id))
            .map(|m| {
                let (assigned, completed) = counts.get(&m.member_id).copied().unwrap_or_default();
                ComplianceRow {
                    member_id: m.member_id.clone(),
                    username: m.username.clone(),
                    assigned,
                    completed,
                    rate: (assigned > 0).then(|| completed as f64 / assigned as f64),
                }
            })
            .collect();
        rows.sort_by(|a, b| a.username.cmp(&b.username));
        rows
    }
}

/// Append-only newline-delimited JSON file with an in-memory mirror.
#[derive(Debug)]
pub struct JsonLines<T> {
    path: Option<PathBuf>,
    inner: Mutex<(Vec<T>, Option<File>)>,
}

impl<T: Serialize + for<'de> Deserialize<'de> + Clone> JsonLines<T> {
    pub fn in_memory() -> Self {
        JsonLines { path: None, inner: Mutex::new((Vec::new(), None)) }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut items = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    items.push(serde_json::from_str(&line)?);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(JsonLines { path: Some(path), inner: Mutex::new((items, Some(file))) })
    }

    pub fn append(&self, item: T) -> Result<()> {
        let mut guard = self.inner.lock();
        if let Some(f) = guard.1.as_mut() {
            let mut line = serde_json::to_string(&item)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        guard.0.push(item);
        Ok(())
    }

    pub fn items(&self) -> Vec<T> {
        self.inner.lock().0.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Raw file contents, or the serialized mirror when in memory.
    pub fn dump(&self) -> io::Result<String> {
        match &self.path {
            Some(p) => std::fs::read_to_string(p),
            None => {
                let guard = self.inner.lock();
                Ok(guard.0.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect())
            }
        }
    }
}

pub type ResponseStore = JsonLines<AnonymousResponse>;
pub type Outbox = JsonLines<OutboxEntry>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{from_millis, parse_rfc3339};
    use crate::registry::{Descriptor, NewMember, Registry, Role};

    fn member(reg: &mut Registry, name: &str) -> Member {
        reg.insert(
            NewMember {
                username: name.into(),
                email: format!("{name}@lab.example"),
                display_name: String::new(),
                role: Role::User,
                descriptor: Descriptor::Participant,
                password: None,
            },
            from_millis(0),
        )
        .unwrap()
    }

    fn ts(s: &str) -> Timestamp {
        parse_rfc3339(s).unwrap()
    }

    #[test]
    fn id_is_deterministic_128_bit_hex() {
        let salt = SecretSalt::from_bytes([7; 16]);
        let t = ts("2021-03-01T09:00:00Z");
        let a = anonymous_id(&salt, "occupant7", "https://survey.example/s1", &t);
        assert_eq!(a, anonymous_id(&salt, "occupant7", "https://survey.example/s1", &t));
        assert_eq!(a.len(), 32);
        assert!(a.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
        let later = anonymous_id(&salt, "occupant7", "https://survey.example/s1", &ts("2021-03-08T09:00:00Z"));
        assert_ne!(a, later);
    }

    #[test]
    fn id_matches_independent_digest() {
        let salt = SecretSalt::from_bytes(*b"0123456789abcdef");
        let t = ts("2021-03-01T09:00:00Z");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"0123456789abcdef");
        buf.extend_from_slice(b"occupant7");
        buf.extend_from_slice(b"https://survey.example/s1");
        buf.extend_from_slice(b"2021-03-01T09:00:00.000Z");
        let expected = hex::encode(&Sha256::digest(&buf)[..16]);
        assert_eq!(anonymous_id(&salt, "occupant7", "https://survey.example/s1", &t), expected);
    }

    #[test]
    fn unique_together() {
        let mut reg = Registry::default();
        let a = member(&mut reg, "a");
        let b = member(&mut reg, "b");
        let mut s = Surveys::default();
        let t = s.add_template("weekly".into(), "https://survey.example/w".into(), Cadence::Weekly).unwrap();
        let open = ts("2021-03-01T09:00:00Z");
        let close = ts("2021-03-05T17:00:00Z");
        s.schedule(&a, &t.template_id, open, close).unwrap();
        assert!(matches!(s.schedule(&a, &t.template_id, open, close), Err(Error::DuplicateAssignment)));
        s.schedule(&b, &t.template_id, open, close).unwrap();
        assert!(matches!(s.schedule(&a, &t.template_id, close, open), Err(Error::InvalidWindow(_))));
    }

    #[test]
    fn completion_window_and_idempotence() {
        let mut reg = Registry::default();
        let a = member(&mut reg, "a");
        let mut s = Surveys::default();
        let t = s.add_template("w".into(), "https://survey.example/w".into(), Cadence::Weekly).unwrap();
        let open = ts("2021-03-01T09:00:00Z");
        let close = ts("2021-03-05T17:00:00Z");
        let grace = chrono::Duration::hours(24);
        let x = s.schedule(&a, &t.template_id, open, close).unwrap();
        let y = s.schedule(&a, &t.template_id, close, close + chrono::Duration::days(4)).unwrap();
        let done = s.complete(&x.anonymous_id, ts("2021-03-02T10:00:00Z"), grace).unwrap();
        assert!(done.completed && done.completed_at.is_some());
        assert!(matches!(s.complete(&x.anonymous_id, ts("2021-03-02T10:00:00Z"), grace), Err(Error::AlreadyCompleted)));
        let late = y.close_time + chrono::Duration::days(10);
        assert!(matches!(s.complete(&y.anonymous_id, late, grace), Err(Error::WindowClosed(_))));
        assert!(matches!(s.complete("feedface", late, grace), Err(Error::UnknownId)));
    }

    #[test]
    fn extension_keeps_id() {
        let mut reg = Registry::default();
        let a = member(&mut reg, "a");
        let mut s = Surveys::default();
        let t = s.add_template("w".into(), "https://survey.example/w".into(), Cadence::Weekly).unwrap();
        let x = s.schedule(&a, &t.template_id, ts("2021-03-01T09:00:00Z"), ts("2021-03-05T17:00:00Z")).unwrap();
        let ext = s.extend(&x.assignment_id, x.close_time + chrono::Duration::hours(48)).unwrap();
        assert_eq!(ext.anonymous_id, x.anonymous_id);
        assert!(matches!(s.extend(&x.assignment_id, x.close_time), Err(Error::InvalidWindow(_))));
    }

    #[test]
    fn compliance_rates() {
        let mut reg = Registry::default();
        let a = member(&mut reg, "a");
        let b = member(&mut reg, "b");
        let mut s = Surveys::default();
        let t = s.add_template("d".into(), "https://survey.example/d".into(), Cadence::Daily).unwrap();
        let day = chrono::Duration::days(1);
        let base = ts("2021-03-01T09:00:00Z");
        let ids: Vec<_> = (0..3).map(|i| s.schedule(&a, &t.template_id, base + day * i, base + day * i + day).unwrap()).collect();
        for x in &ids[..2] {
            s.complete(&x.anonymous_id, x.open_time, chrono::Duration::zero()).unwrap();
        }
        let rows = s.compliance(reg.members(), &ComplianceFilter::default());
        let ra = rows.iter().find(|r| r.member_id == a.member_id).unwrap();
        assert_eq!((ra.assigned, ra.completed), (3, 2));
        assert!((ra.rate.unwrap() - 0.667).abs() < 0.001);
        let rb = rows.iter().find(|r| r.member_id == b.member_id).unwrap();
        assert_eq!(rb.rate, None);
    }

    #[test]
    fn mock_links_carry_id() {
        let link = MockProvider.distribution_link("https://survey.example/s?lang=en", "abc123");
        assert_eq!(link, "https://survey.example/s?lang=en&aid=abc123");
        assert_eq!(MockProvider::id_from_link(&link), Some("abc123"));
    }

    #[test]
    fn jsonl_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("outbox.jsonl");
        let out = Outbox::open(&path).unwrap();
        out.append(OutboxEntry { queued_at: from_millis(0), email: "a@b".into(), link: "l".into() }).unwrap();
        drop(out);
        let again = Outbox::open(&path).unwrap();
        assert_eq!(again.len(), 1);
        assert_eq!(
            again.dump().unwrap(),
            "{\"queued_at\":\"1970-01-01T00:00:00.000Z\",\"email\":\"a@b\",\"link\":\"l\"}\n"
        );
    }
}

//! Member accounts, the three-tier privilege model and the authorization
//! decision point.
//!
//! Authorization keys off [`Role`] only. A member's [`Descriptor`] (researcher,
//! organizer, participant, ...) is informational metadata.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{serde_ms, Timestamp};
use crate::error::{Error, Result};
use crate::ids::MemberId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Staff,
    Admin,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::User, Role::Staff, Role::Admin];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Descriptor {
    Researcher,
    Developer,
    Organizer,
    Participant,
    NonParticipant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ReadPublic,
    ReadCompliance,
    WriteSurveyMetadata,
    WriteDeviceMetadata,
    CreateModel,
    DeleteModel,
    ReadOwnData,
    DeleteOwnData,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::ReadPublic,
        Action::ReadCompliance,
        Action::WriteSurveyMetadata,
        Action::WriteDeviceMetadata,
        Action::CreateModel,
        Action::DeleteModel,
        Action::ReadOwnData,
        Action::DeleteOwnData,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Member,
    Device,
    Floorplan,
    Seat,
    SurveyTemplate,
    SurveyAssignment,
    Dashboard,
    Datapoint,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 8] = [
        ResourceKind::Member,
        ResourceKind::Device,
        ResourceKind::Floorplan,
        ResourceKind::Seat,
        ResourceKind::SurveyTemplate,
        ResourceKind::SurveyAssignment,
        ResourceKind::Dashboard,
        ResourceKind::Datapoint,
    ];
}

/// An action applied to a kind of resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Permission {
    pub action: Action,
    pub resource_kind: ResourceKind,
}

impl Permission {
    pub const fn new(action: Action, resource_kind: ResourceKind) -> Self {
        Permission { action, resource_kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

/// Whether an action is meaningful for a resource kind at all. Triples
/// outside this relation are denied for every role.
const fn applies(action: Action, kind: ResourceKind) -> bool {
    use Action::*;
    use ResourceKind::*;
    match action {
        ReadPublic | CreateModel | DeleteModel => true,
        ReadCompliance => matches!(kind, Member | SurveyTemplate | SurveyAssignment),
        WriteSurveyMetadata => matches!(kind, SurveyTemplate | SurveyAssignment),
        WriteDeviceMetadata => matches!(kind, Device | Floorplan | Seat | Dashboard | Datapoint),
        ReadOwnData => matches!(kind, Member | Seat | SurveyAssignment | Dashboard | Datapoint),
        DeleteOwnData => matches!(kind, Seat | Datapoint),
    }
}

/// The lowest role granted an action.
const fn minimum_role(action: Action) -> Role {
    match action {
        Action::ReadPublic | Action::ReadOwnData | Action::DeleteOwnData => Role::User,
        Action::ReadCompliance | Action::WriteSurveyMetadata | Action::WriteDeviceMetadata => {
            Role::Staff
        }
        Action::CreateModel | Action::DeleteModel => Role::Admin,
    }
}

/// Pure decision over the static matrix. Total over every
/// (role, action, resource kind) triple.
pub fn authorize(role: Role, permission: Permission) -> Decision {
    if applies(permission.action, permission.resource_kind) && role >= minimum_role(permission.action) {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

/// Anonymous callers hold `read_public` and nothing else.
pub fn authorize_anonymous(permission: Permission) -> Decision {
    if permission.action == Action::ReadPublic {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

/// The full matrix, enumerated. Used by the permission report and tests.
pub fn permission_matrix() -> BTreeMap<(Role, Action, ResourceKind), Decision> {
    let mut table = BTreeMap::new();
    for role in Role::ALL {
        for action in Action::ALL {
            for kind in ResourceKind::ALL {
                table.insert((role, action, kind), authorize(role, Permission::new(action, kind)));
            }
        }
    }
    table
}

/// Who is making a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Member { id: MemberId, role: Role },
    Anonymous,
}

impl Principal {
    pub fn member_id(&self) -> Option<&MemberId> {
        match self {
            Principal::Member { id, .. } => Some(id),
            Principal::Anonymous => None,
        }
    }

    pub fn role(&self) -> Option<Role> {
        match self {
            Principal::Member { role, .. } => Some(*role),
            Principal::Anonymous => None,
        }
    }

    pub fn is_staff_or_above(&self) -> bool {
        self.role().is_some_and(|r| r >= Role::Staff)
    }

    pub fn decide(&self, permission: Permission) -> Decision {
        match self {
            Principal::Member { role, .. } => authorize(*role, permission),
            Principal::Anonymous => authorize_anonymous(permission),
        }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Member { id, .. } => write!(f, "member:{id}"),
            Principal::Anonymous => f.write_str("anonymous"),
        }
    }
}

/// Per-member key material for anonymous survey identifiers. Never
/// serialized through the public member representation and redacted in
/// debug output.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct SecretSalt([u8; 16]);

impl SecretSalt {
    pub fn fresh() -> Self {
        let mut bytes = [0u8; 16];
        rand::rng().fill_bytes(&mut bytes);
        SecretSalt(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        SecretSalt(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for SecretSalt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretSalt(..)")
    }
}

/// Salted, iterated SHA-256 of a password.
#[derive(Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CredentialHash {
    #[serde(with = "hex::serde")]
    salt: Vec<u8>,
    #[serde(with = "hex::serde")]
    digest: Vec<u8>,
}

const CREDENTIAL_ROUNDS: u32 = 10_000;

impl CredentialHash {
    pub fn new(password: &str) -> Self {
        let mut salt = vec![0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        let digest = Self::stretch(&salt, password);
        CredentialHash { salt, digest }
    }

    pub fn verify(&self, password: &str) -> bool {
        !self.digest.is_empty() && Self::stretch(&self.salt, password) == self.digest
    }

    fn stretch(salt: &[u8], password: &str) -> Vec<u8> {
        let mut acc = Sha256::new().chain_update(salt).chain_update(password.as_bytes()).finalize();
        for _ in 1..CREDENTIAL_ROUNDS {
            acc = Sha256::new().chain_update(acc).chain_update(salt).finalize();
        }
        acc.to_vec()
    }
}

impl fmt::Debug for CredentialHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CredentialHash(..)")
    }
}

/// A digital account. The public serialization omits the credential hash
/// and the secret salt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub member_id: MemberId,
    pub username: String,
    pub email: String,
    pub display_name: String,
    pub role: Role,
    pub descriptor: Descriptor,
    #[serde(skip)]
    pub credential_hash: CredentialHash,
    #[serde(skip)]
    pub secret_salt: SecretSalt,
    #[serde(with = "serde_ms")]
    pub created_at: Timestamp,
    pub active: bool,
}

impl Member {
    pub fn principal(&self) -> Principal {
        Principal::Member { id: self.member_id.clone(), role: self.role }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct NewMember {
    pub username: String,
    #[serde(default)]
    pub email: String,
    #[serde(default)]
    pub display_name: String,
    pub role: Role,
    pub descriptor: Descriptor,
    #[serde(default)]
    pub password: Option<String>,
}

/// Storage form of a member, including the fields the public form omits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct MemberRecord {
    #[serde(flatten)]
    member: Member,
    credential: CredentialHash,
    #[serde(with = "hex::serde")]
    secret_salt: [u8; 16],
}

impl From<&Member> for MemberRecord {
    fn from(m: &Member) -> Self {
        MemberRecord {
            member: m.clone(),
            credential: m.credential_hash.clone(),
            secret_salt: *m.secret_salt.as_bytes(),
        }
    }
}

impl From<MemberRecord> for Member {
    fn from(r: MemberRecord) -> Self {
        let mut m = r.member;
        m.credential_hash = r.credential;
        m.secret_salt = SecretSalt::from_bytes(r.secret_salt);
        m
    }
}

fn records_ser<S: serde::Serializer>(
    members: &BTreeMap<MemberId, Member>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let records: Vec<MemberRecord> = members.values().map(MemberRecord::from).collect();
    serde::Serialize::serialize(&records, s)
}

fn records_de<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<BTreeMap<MemberId, Member>, D::Error> {
    let records: Vec<MemberRecord> = Deserialize::deserialize(d)?;
    Ok(records
        .into_iter()
        .map(|r| {
            let m = Member::from(r);
            (m.member_id.clone(), m)
        })
        .collect())
}

/// Member table. Mutations here perform validation only; authorization is
/// applied by the caller.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Registry {
    #[serde(serialize_with = "records_ser", deserialize_with = "records_de")]
    members: BTreeMap<MemberId, Member>,
}

impl Registry {
    pub fn get(&self, id: &MemberId) -> Result<&Member> {
        self.members.get(id).ok_or_else(|| Error::not_found("member", id.as_str()))
    }

    pub fn by_username(&self, username: &str) -> Option<&Member> {
        self.members.values().find(|m| m.username == username)
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn insert(&mut self, spec: NewMember, now: Timestamp) -> Result<Member> {
        if spec.username.trim().is_empty() {
            return Err(Error::InvalidArgument("username must not be empty".into()));
        }
        if self.by_username(&spec.username).is_some() {
            return Err(Error::DuplicateUsername(spec.username));
        }
        let credential_hash = spec.password.as_deref().map(CredentialHash::new).unwrap_or_default();
        let member = Member {
            member_id: MemberId::generate(),
            display_name: if spec.display_name.is_empty() { spec.username.clone() } else { spec.display_name },
            username: spec.username,
            email: spec.email,
            role: spec.role,
            descriptor: spec.descriptor,
            credential_hash,
            secret_salt: SecretSalt::fresh(),
            created_at: now,
            active: true,
        };
        self.members.insert(member.member_id.clone(), member.clone());
        Ok(member)
    }

    pub fn remove(&mut self, id: &MemberId) -> Result<Member> {
        self.members.remove(id).ok_or_else(|| Error::not_found("member", id.as_str()))
    }

    pub fn rotate_secret(&mut self, id: &MemberId) -> Result<Member> {
        let m = self.members.get_mut(id).ok_or_else(|| Error::not_found("member", id.as_str()))?;
        let mut fresh = SecretSalt::fresh();
        while fresh == m.secret_salt {
            fresh = SecretSalt::fresh();
        }
        m.secret_salt = fresh;
        Ok(m.clone())
    }

    pub fn set_role(&mut self, id: &MemberId, role: Role) -> Result<Member> {
        let m = self.members.get_mut(id).ok_or_else(|| Error::not_found("member", id.as_str()))?;
        m.role = role;
        Ok(m.clone())
    }

    pub fn set_active(&mut self, id: &MemberId, active: bool) -> Result<Member> {
        let m = self.members.get_mut(id).ok_or_else(|| Error::not_found("member", id.as_str()))?;
        m.active = active;
        Ok(m.clone())
    }

    pub fn set_password(&mut self, id: &MemberId, password: &str) -> Result<()> {
        let m = self.members.get_mut(id).ok_or_else(|| Error::not_found("member", id.as_str()))?;
        m.credential_hash = CredentialHash::new(password);
        Ok(())
    }

    /// Active member whose password matches, if any.
    pub fn verify_login(&self, username: &str, password: &str) -> Option<&Member> {
        self.by_username(username).filter(|m| m.active && m.credential_hash.verify(password))
    }
}

#[derive(Debug, Clone)]
struct Session {
    member_id: MemberId,
    expires_at: Timestamp,
}

/// Opaque bearer tokens. Expired or unknown tokens resolve to nothing and the
/// caller degrades to anonymous.
#[derive(Debug, Default)]
pub struct TokenStore {
    sessions: HashMap<String, Session>,
}

impl TokenStore {
    pub fn issue(&mut self, member_id: MemberId, expires_at: Timestamp) -> String {
        let mut raw = [0u8; 32];
        rand::rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        self.sessions.insert(token.clone(), Session { member_id, expires_at });
        token
    }

    pub fn resolve(&self, token: &str, now: Timestamp) -> Option<&MemberId> {
        self.sessions.get(token).filter(|s| s.expires_at > now).map(|s| &s.member_id)
    }

    pub fn revoke_member(&mut self, member_id: &MemberId) {
        self.sessions.retain(|_, s| &s.member_id != member_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::from_millis;

    fn spec(name: &str, role: Role) -> NewMember {
        NewMember {
            username: name.into(),
            email: format!("{name}@example.org"),
            display_name: String::new(),
            role,
            descriptor: Descriptor::Participant,
            password: Some("pw".into()),
        }
    }

    #[test]
    fn staff_reads_compliance_user_does_not() {
        let p = Permission::new(Action::ReadCompliance, ResourceKind::SurveyAssignment);
        assert_eq!(authorize(Role::Staff, p), Decision::Allow);
        assert_eq!(authorize(Role::User, p), Decision::Deny);
    }

    #[test]
    fn admin_deletes_members_staff_cannot_create_them() {
        assert!(authorize(Role::Admin, Permission::new(Action::DeleteModel, ResourceKind::Member)).is_allow());
        assert!(!authorize(Role::Staff, Permission::new(Action::CreateModel, ResourceKind::Member)).is_allow());
        assert!(!authorize(Role::Staff, Permission::new(Action::DeleteModel, ResourceKind::Member)).is_allow());
    }

    #[test]
    fn matrix_is_total() {
        assert_eq!(permission_matrix().len(), 3 * 8 * 8);
    }

    #[test]
    fn anonymous_only_reads_public() {
        for action in Action::ALL {
            for kind in ResourceKind::ALL {
                let d = authorize_anonymous(Permission::new(action, kind));
                assert_eq!(d.is_allow(), action == Action::ReadPublic);
            }
        }
    }

    #[test]
    fn duplicate_username_rejected() {
        let mut reg = Registry::default();
        reg.insert(spec("occupant7", Role::User), from_millis(0)).unwrap();
        let err = reg.insert(spec("occupant7", Role::Staff), from_millis(0)).unwrap_err();
        assert!(matches!(err, Error::DuplicateUsername(_)));
    }

    #[test]
    fn rotation_yields_distinct_salts() {
        let mut reg = Registry::default();
        let m = reg.insert(spec("a", Role::User), from_millis(0)).unwrap();
        let first = reg.rotate_secret(&m.member_id).unwrap().secret_salt;
        let second = reg.rotate_secret(&m.member_id).unwrap().secret_salt;
        assert_ne!(m.secret_salt, first);
        assert_ne!(first, second);
    }

    #[test]
    fn public_serialization_omits_secrets() {
        let mut reg = Registry::default();
        let m = reg.insert(spec("a", Role::User), from_millis(0)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains(&hex::encode(m.secret_salt.as_bytes())));
        assert!(!json.contains("secret_salt"));
        assert!(!json.contains("credential"));
        assert_eq!(format!("{:?}", m.secret_salt), "SecretSalt(..)");
    }

    #[test]
    fn storage_form_keeps_secrets() {
        let mut reg = Registry::default();
        let m = reg.insert(spec("a", Role::User), from_millis(0)).unwrap();
        let json = serde_json::to_string(&reg).unwrap();
        let back: Registry = serde_json::from_str(&json).unwrap();
        let restored = back.get(&m.member_id).unwrap();
        assert_eq!(restored.secret_salt, m.secret_salt);
        assert!(restored.credential_hash.verify("pw"));
    }

    #[test]
    fn login_checks_password_and_activity() {
        let mut reg = Registry::default();
        let m = reg.insert(spec("a", Role::User), from_millis(0)).unwrap();
        assert!(reg.verify_login("a", "pw").is_some());
        assert!(reg.verify_login("a", "nope").is_none());
        reg.set_active(&m.member_id, false).unwrap();
        assert!(reg.verify_login("a", "pw").is_none());
    }

    #[test]
    fn expired_tokens_do_not_resolve() {
        let mut tokens = TokenStore::default();
        let t = tokens.issue(MemberId::from("m"), from_millis(1_000));
        assert!(tokens.resolve(&t, from_millis(999)).is_some());
        assert!(tokens.resolve(&t, from_millis(1_000)).is_none());
        assert!(tokens.resolve("garbage", from_millis(0)).is_none());
    }
}

//! Logical NAT gateway for agents that cannot accept inbound connections.
//!
//! A private agent dials out to the gateway, which leases it a public port
//! from a fixed pool. The master only ever sees the public endpoint; traffic
//! to it is relayed over the agent's outbound channel.
//!
//! Mutating operations come in two halves: a `plan_*` method that validates
//! and describes the change without touching state, and an `apply_*` method
//! that commits it. The convenience methods (`register_private_agent`,
//! `renew`, `sweep_expired`) do both. The master uses the split form so that
//! every change can be written to the event log before it is applied.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::ids::MappingId;
use crate::model::{Endpoint, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatConfig {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    pub gateway_host: Ipv4Addr,
    pub port_range_start: u16,
    pub port_range_end: u16,
    #[serde(default = "default_lease_ttl")]
    pub lease_ttl_s: u64,
    /// Simulation only: delay between relaying a launch and the agent
    /// reporting the task running.
    #[serde(default)]
    pub relay_latency_s: u64,
}

fn default_enabled() -> bool {
    true
}

fn default_lease_ttl() -> u64 {
    60
}

impl Default for NatConfig {
    fn default() -> Self {
        NatConfig {
            enabled: true,
            gateway_host: Ipv4Addr::new(203, 0, 113, 10),
            port_range_start: 31000,
            port_range_end: 31999,
            lease_ttl_s: default_lease_ttl(),
            relay_latency_s: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MappingState {
    Live,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatMapping {
    pub mapping_id: MappingId,
    pub agent_internal: Endpoint,
    pub public: Endpoint,
    pub lease_expires_at: Timestamp,
    pub state: MappingState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortPool {
    pub gateway_host: Ipv4Addr,
    pub range_start: u16,
    pub range_end: u16,
    pub allocated: BTreeSet<u16>,
}

impl PortPool {
    pub fn new(gateway_host: Ipv4Addr, range_start: u16, range_end: u16) -> Self {
        PortPool {
            gateway_host,
            range_start,
            range_end,
            allocated: BTreeSet::new(),
        }
    }

    pub fn size(&self) -> usize {
        if self.range_start > self.range_end {
            0
        } else {
            (self.range_end - self.range_start) as usize + 1
        }
    }

    pub fn free_count(&self) -> usize {
        self.size() - self.allocated.len()
    }

    pub fn lowest_free(&self) -> Option<u16> {
        if self.range_start > self.range_end || self.range_start == 0 {
            return None;
        }
        (self.range_start..=self.range_end).find(|p| !self.allocated.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NatError {
    #[error("port pool exhausted")]
    PoolExhausted,
    #[error("internal endpoint {0} already has a live mapping")]
    DuplicateInternalEndpoint(Endpoint),
    #[error("no live mapping found")]
    MappingNotFound,
    #[error("agent channel is down")]
    ChannelDown,
    #[error("NAT gateway is disabled")]
    Disabled,
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
}

/// Acknowledgement of a relayed message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayAck {
    pub mapping_id: MappingId,
    pub delivered_to: Endpoint,
    pub bytes: usize,
    pub sequence: u64,
}

/// The transport half of an agent's outbound connection.
pub trait RelayChannel: Send {
    fn deliver(&mut self, frame: &[u8]) -> Result<(), NatError>;
}

#[derive(Serialize, Deserialize)]
pub struct NatGateway {
    config: NatConfig,
    pool: PortPool,
    mappings: BTreeMap<MappingId, NatMapping>,
    /// Whether each live mapping's outbound channel is connected.
    channels: BTreeMap<MappingId, bool>,
    next_mapping: u64,
    #[serde(skip)]
    delivered: BTreeMap<MappingId, u64>,
    #[serde(skip)]
    transports: BTreeMap<MappingId, Box<dyn RelayChannel>>,
}

impl std::fmt::Debug for NatGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NatGateway")
            .field("config", &self.config)
            .field("pool", &self.pool)
            .field("mappings", &self.mappings)
            .field("channels", &self.channels)
            .field("next_mapping", &self.next_mapping)
            .finish_non_exhaustive()
    }
}

impl Clone for NatGateway {
    /// Transports are process-local and are not cloned.
    fn clone(&self) -> Self {
        NatGateway {
            config: self.config.clone(),
            pool: self.pool.clone(),
            mappings: self.mappings.clone(),
            channels: self.channels.clone(),
            next_mapping: self.next_mapping,
            delivered: self.delivered.clone(),
            transports: BTreeMap::new(),
        }
    }
}

impl PartialEq for NatGateway {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.pool == other.pool
            && self.mappings == other.mappings
            && self.channels == other.channels
            && self.next_mapping == other.next_mapping
    }
}

impl NatGateway {
    pub fn new(config: NatConfig) -> Result<Self, NatError> {
        if config.port_range_start == 0 || config.port_range_start > config.port_range_end {
            return Err(NatError::InvalidConfig(format!(
                "port range {}..={} is empty or starts at 0",
                config.port_range_start, config.port_range_end
            )));
        }
        if config.lease_ttl_s == 0 {
            return Err(NatError::InvalidConfig("lease_ttl_s must be positive".into()));
        }
        let pool = PortPool::new(
            config.gateway_host,
            config.port_range_start,
            config.port_range_end,
        );
        Ok(NatGateway {
            config,
            pool,
            mappings: BTreeMap::new(),
            channels: BTreeMap::new(),
            next_mapping: 1,
            delivered: BTreeMap::new(),
            transports: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn pool(&self) -> &PortPool {
        &self.pool
    }

    pub fn mappings(&self) -> impl Iterator<Item = &NatMapping> {
        self.mappings.values()
    }

    pub fn mapping(&self, id: MappingId) -> Option<&NatMapping> {
        self.mappings.get(&id)
    }

    pub fn live_mappings(&self) -> impl Iterator<Item = &NatMapping> {
        self.mappings
            .values()
            .filter(|m| m.state == MappingState::Live)
    }

    pub fn live_by_public(&self, public: &Endpoint) -> Option<&NatMapping> {
        self.live_mappings().find(|m| &m.public == public)
    }

    pub fn plan_register(&self, internal: Endpoint, now: Timestamp) -> Result<NatMapping, NatError> {
        if !self.config.enabled {
            return Err(NatError::Disabled);
        }
        if self.live_mappings().any(|m| m.agent_internal == internal) {
            return Err(NatError::DuplicateInternalEndpoint(internal));
        }
        let port = self.pool.lowest_free().ok_or(NatError::PoolExhausted)?;
        Ok(NatMapping {
            mapping_id: MappingId(self.next_mapping),
            agent_internal: internal,
            public: Endpoint {
                host: self.config.gateway_host,
                port,
            },
            lease_expires_at: now + self.config.lease_ttl_s,
            state: MappingState::Live,
        })
    }

    pub fn apply_mapped(&mut self, mapping: &NatMapping) {
        self.pool.allocated.insert(mapping.public.port);
        self.next_mapping = self.next_mapping.max(mapping.mapping_id.0 + 1);
        self.channels.insert(mapping.mapping_id, true);
        self.mappings.insert(mapping.mapping_id, mapping.clone());
    }

    /// Leases the lowest free public port to `internal`.
    pub fn register_private_agent(
        &mut self,
        internal: Endpoint,
        now: Timestamp,
    ) -> Result<NatMapping, NatError> {
        let mapping = self.plan_register(internal, now)?;
        self.apply_mapped(&mapping);
        Ok(mapping)
    }

    pub fn resolve(&self, public: &Endpoint) -> Result<Endpoint, NatError> {
        self.live_by_public(public)
            .map(|m| m.agent_internal)
            .ok_or(NatError::MappingNotFound)
    }

    /// Returns the new expiry.
    pub fn plan_renew(&self, id: MappingId, now: Timestamp) -> Result<Timestamp, NatError> {
        match self.mappings.get(&id) {
            Some(m) if m.state == MappingState::Live => Ok(now + self.config.lease_ttl_s),
            _ => Err(NatError::MappingNotFound),
        }
    }

    pub fn apply_renewed(&mut self, id: MappingId, lease_expires_at: Timestamp) {
        if let Some(m) = self.mappings.get_mut(&id) {
            m.lease_expires_at = lease_expires_at;
        }
    }

    pub fn renew(&mut self, id: MappingId, now: Timestamp) -> Result<NatMapping, NatError> {
        let expiry = self.plan_renew(id, now)?;
        self.apply_renewed(id, expiry);
        Ok(self.mappings[&id].clone())
    }

    /// Live mappings whose lease ended strictly before `now`.
    pub fn plan_sweep(&self, now: Timestamp) -> Vec<MappingId> {
        self.live_mappings()
            .filter(|m| m.lease_expires_at < now)
            .map(|m| m.mapping_id)
            .collect()
    }

    pub fn apply_expired(&mut self, id: MappingId) {
        if let Some(m) = self.mappings.get_mut(&id) {
            if m.state == MappingState::Live {
                m.state = MappingState::Expired;
                self.pool.allocated.remove(&m.public.port);
            }
        }
        self.channels.remove(&id);
        self.delivered.remove(&id);
        self.transports.remove(&id);
    }

    pub fn sweep_expired(&mut self, now: Timestamp) -> Vec<MappingId> {
        let expired = self.plan_sweep(now);
        for id in &expired {
            self.apply_expired(*id);
        }
        expired
    }

    pub fn apply_channel(&mut self, id: MappingId, up: bool) {
        if let Some(status) = self.channels.get_mut(&id) {
            *status = up;
        }
        if !up {
            self.transports.remove(&id);
        }
    }

    pub fn channel_up(&self, id: MappingId) -> bool {
        self.channels.get(&id).copied().unwrap_or(false)
    }

    /// Attaches a transport to an existing live mapping's channel. Without
    /// one, relay is a logical hop that acknowledges immediately.
    pub fn attach_transport(
        &mut self,
        id: MappingId,
        transport: Box<dyn RelayChannel>,
    ) -> Result<(), NatError> {
        match self.mappings.get(&id) {
            Some(m) if m.state == MappingState::Live => {
                self.transports.insert(id, transport);
                Ok(())
            }
            _ => Err(NatError::MappingNotFound),
        }
    }

    /// Forwards one framed message to the agent behind `public`.
    ///
    /// Delivery is at-most-once: a failed delivery is reported and never
    /// retried here.
    pub fn relay(&mut self, public: &Endpoint, message: &[u8]) -> Result<RelayAck, NatError> {
        let mapping = self
            .live_by_public(public)
            .ok_or(NatError::MappingNotFound)?
            .clone();
        if !self.channel_up(mapping.mapping_id) {
            return Err(NatError::ChannelDown);
        }
        if let Some(transport) = self.transports.get_mut(&mapping.mapping_id) {
            let frame = encode_frame(message);
            if let Err(err) = transport.deliver(&frame) {
                self.apply_channel(mapping.mapping_id, false);
                return Err(err);
            }
        }
        let counter = self.delivered.entry(mapping.mapping_id).or_insert(0);
        *counter += 1;
        let sequence = *counter;
        Ok(RelayAck {
            mapping_id: mapping.mapping_id,
            delivered_to: mapping.agent_internal,
            bytes: message.len(),
            sequence,
        })
    }
}

/// Frames a message body: 4-byte big-endian length followed by the body.
pub fn encode_frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("incomplete frame: need {needed} bytes, have {have}")]
    Incomplete { needed: usize, have: usize },
    #[error("frame body is not valid UTF-8 JSON: {0}")]
    BadBody(String),
}

/// Decodes one frame from the front of `buf`, returning its JSON body and the
/// number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(serde_json::Value, usize), FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Incomplete {
            needed: 4,
            have: buf.len(),
        });
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    let end = 4 + len;
    if buf.len() < end {
        return Err(FrameError::Incomplete {
            needed: end,
            have: buf.len(),
        });
    }
    let text = std::str::from_utf8(&buf[4..end]).map_err(|e| FrameError::BadBody(e.to_string()))?;
    let value = serde_json::from_str(text).map_err(|e| FrameError::BadBody(e.to_string()))?;
    Ok((value, end))
}

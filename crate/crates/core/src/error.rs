use crate::ids::{AgentId, ClusterId, JobId, OfferId, TenantId};
use crate::master::ApplyError;
use crate::model::{Endpoint, JobState, SpecError};
use crate::nat::NatError;
use crate::policy::PolicyError;
use crate::resources::{ResourceError, ResourceVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MasterError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid job spec: {0}")]
    InvalidSpec(#[from] SpecError),
    #[error("agent capacity must be positive in every dimension, got {0}")]
    InvalidCapacity(ResourceVector),
    #[error("endpoint {endpoint} is already registered in cluster {cluster_id}")]
    AlreadyRegistered {
        cluster_id: ClusterId,
        endpoint: Endpoint,
    },
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("offer {0} not found")]
    OfferNotFound(OfferId),
    #[error("offer {0} has expired")]
    OfferExpired(OfferId),
    #[error("launches need {requested} but the offer holds {offered}")]
    OverSubscription {
        offered: ResourceVector,
        requested: ResourceVector,
    },
    #[error("job {0} is not queued")]
    JobNotQueued(JobId),
    #[error("job {0} is not running")]
    JobNotRunning(JobId),
    #[error("job {job_id} is {state} and cannot be cancelled")]
    NotCancellable { job_id: JobId, state: JobState },
    #[error("no agent in any cluster can ever hold {0}")]
    RequestUnsatisfiable(ResourceVector),
    #[error("offer {offer_id} is addressed to {addressed}, not the owner of {job_id}")]
    WrongTenant {
        offer_id: OfferId,
        job_id: JobId,
        addressed: TenantId,
    },
    #[error("invalid launch: {0}")]
    InvalidLaunch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nat(#[from] NatError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Replay(#[from] ApplyError),
}

impl MasterError {
    /// Stable snake_case code for wire replies.
    pub fn code(&self) -> &'static str {
        match self {
            MasterError::InvalidConfig(_) => "invalid_config",
            MasterError::InvalidSpec(_) => "invalid_spec",
            MasterError::InvalidCapacity(_) => "invalid_capacity",
            MasterError::AlreadyRegistered { .. } => "already_registered",
            MasterError::UnknownAgent(_) => "unknown_agent",
            MasterError::UnknownJob(_) => "unknown_job",
            MasterError::UnknownCluster(_) => "unknown_cluster",
            MasterError::OfferNotFound(_) => "offer_not_found",
            MasterError::OfferExpired(_) => "offer_expired",
            MasterError::OverSubscription { .. } => "over_subscription",
            MasterError::JobNotQueued(_) => "job_not_queued",
            MasterError::JobNotRunning(_) => "job_not_running",
            MasterError::NotCancellable { .. } => "not_cancellable",
            MasterError::RequestUnsatisfiable(_) => "request_unsatisfiable",
            MasterError::WrongTenant { .. } => "wrong_tenant",
            MasterError::InvalidLaunch(_) => "invalid_launch",
            MasterError::Policy(_) => "policy",
            MasterError::Nat(_) => "nat",
            MasterError::Resource(_) => "resource",
            MasterError::Replay(_) => "replay",
        }
    }

    /// Whether the caller, rather than the system, is at fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, MasterError::Replay(_) | MasterError::InvalidConfig(_))
    }
}

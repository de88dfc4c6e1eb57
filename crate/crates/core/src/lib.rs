pub mod beacon;
pub mod pdc;
pub mod policy;
pub mod registry;
pub mod sample;
pub mod scenario;
pub mod semantics;
pub mod state;

pub use policy::{ControllerCategory, MaybePolicy, Policy, Purpose, Recipient};
pub use semantics::{apply, Operation, Outcome, RejectReason};
pub use state::{
    DataType, DataValue, Declaration, DeviceId, DeviceProfile, Position, Range, Stored,
    SubjectDeviceId, SystemState, Timestamp,
};

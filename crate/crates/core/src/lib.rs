pub mod hypervisor;
pub mod machine;
pub mod stage2;
pub mod channel;
pub mod guest_os;
pub mod harness;
pub mod ta_runtime;

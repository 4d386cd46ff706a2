pub mod boundary;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod interval;
pub mod joint_test;
pub mod numeric;
pub mod oracle;
pub mod pilot;
pub mod precision;
pub mod samplers;
pub mod spending;

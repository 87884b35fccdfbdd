pub mod image;
pub mod oracle;
pub mod trace;
pub mod sim;
pub mod scenario;
pub mod attack;
pub mod bench;
pub mod fuzz;
pub mod campaigns;

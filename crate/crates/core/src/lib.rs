pub mod ble;
pub mod cli;
pub mod clock;
pub mod crypto;
pub mod feasibility;
pub mod keyserver;
pub mod matcher;
pub mod net;
pub mod profiler;
pub mod rational;
pub mod sim;
pub mod wormhole;

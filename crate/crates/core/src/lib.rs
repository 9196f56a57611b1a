pub mod baselines;
pub mod error;
pub mod ipf;
pub mod ips;
pub mod mpicx;
pub mod numerics;
pub mod nss;
pub mod state;
pub mod vsys;
pub mod world;
pub mod verify;

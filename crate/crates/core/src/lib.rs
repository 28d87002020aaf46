pub mod evidence;
pub mod losses;
pub mod numeric;
pub mod special;
pub mod kfs;
pub mod data;
pub mod metrics;
pub mod trainer;

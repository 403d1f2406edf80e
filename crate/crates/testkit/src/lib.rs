//! Loop-level reference implementations, seeded case generators and the
//! check routines shared by the integration tests and the acceptance run.

pub mod cases;
pub mod reference;
pub mod suites;

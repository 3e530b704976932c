//! Certification of iptables spoofing protection.
//!
//! A ruleset is parsed from `iptables-save` output, unfolded into a flat
//! rule list and then checked per interface: every source address the
//! firewall may accept on an interface must belong to the address range
//! assigned to it. The check over-approximates what is accepted, so a
//! `CERTIFIED` verdict is sound even with match conditions it does not
//! understand.

pub mod certifier;
pub mod cli;
pub mod fw_model;
pub mod oracle;
mod par;
pub mod parser;
pub mod preprocess;
pub mod wordset;
pub mod workload;

pub use certifier::{certify_access, certify_all, certify_all_sequential, sp, CertifyError};
pub use fw_model::{CertResult, Ipassmt, PacketPattern, Rule, RulesetTable, Violation};
pub use par::is_parallel;
pub use preprocess::{preprocess, PreprocessError};
pub use wordset::{Cidr, Interval, IntervalSet, Width, Word, WordsetError};

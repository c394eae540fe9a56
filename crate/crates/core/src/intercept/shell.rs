//! Shell-layer interception: a `BASH_ENV`-sourced DEBUG trap.

/// Environment variable naming the shell log file. When unset the trap is a no-op.
pub const SHELL_LOG_ENV: &str = "AER_SHELL_LOG";

const TRAP_SCRIPT: &str = include_str!("../../assets/aer-trap.sh");

/// The trap script, to be installed at container build time and activated
/// with `BASH_ENV=<path>`. Safe to source more than once.
pub fn shell_trap_script() -> &'static str {
    TRAP_SCRIPT
}

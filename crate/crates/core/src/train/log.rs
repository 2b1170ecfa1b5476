use std::fmt::Write as _;
use std::path::Path;

use crate::data::io::write_atomic;
use crate::error::Result;

use super::state::IterationLog;

pub const CSV_HEADER: &str = "iteration,epoch,total,orig,s_x,s_y,d_term,u_term,d_x_loss,d_y_loss";

pub fn loss_csv(logs: &[IterationLog]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for l in logs {
        let b = &l.breakdown;
        // `{:?}` prints the shortest representation that round-trips
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            l.iteration, l.epoch, b.total, b.orig, b.s_x, b.s_y, b.d_term, b.u_term, l.d_x_loss, l.d_y_loss
        );
    }
    out
}

pub fn write_loss_csv(path: &Path, logs: &[IterationLog]) -> Result<()> {
    write_atomic(path, loss_csv(logs).as_bytes())
}

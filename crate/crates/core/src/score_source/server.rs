use std::io::{BufRead, Write};

use super::protocol::{decode_request, encode_reply, Reply, Request};
use super::ScoreSource;
use crate::error::Result;

/// Answer protocol requests from `input` on `output` until a shutdown request or end of input.
///
/// Failed requests are answered with an error reply; the loop keeps serving.
pub fn serve<R: BufRead, W: Write>(source: &ScoreSource, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_request(&line) {
            Ok(Request::Shutdown) => return Ok(()),
            Ok(Request::Hello { .. }) => Reply::Hello { dim: source.dim() },
            Ok(Request::Score { t, z }) => match source.score_batch(t, z.view()) {
                Ok(values) => Reply::Score { values },
                Err(e) => Reply::Error { message: e.to_string() },
            },
            Err(e) => Reply::Error { message: e.to_string() },
        };
        writeln!(output, "{}", encode_reply(&reply)?)?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{DiffusedMeasure, GaussianMixture};
    use crate::schedules::Schedule;
    use crate::score_source::protocol::decode_reply;
    use ndarray::Array1;

    #[test]
    fn answers_hello_score_and_errors_in_order() {
        let g = GaussianMixture::isotropic_gaussian(Array1::zeros(2), 1.0).unwrap();
        let src = ScoreSource::Analytic(DiffusedMeasure::new(g, Schedule::linear(1e-3).unwrap()));
        let input = concat!(
            "{\"op\":\"hello\",\"dim\":2}\n",
            "{\"op\":\"score\",\"t\":0.5,\"z\":[[0.0,0.0]]}\n",
            "garbage\n",
            "{\"op\":\"score\",\"t\":0.5,\"z\":[[0.0,0.0,1.0]]}\n",
            "{\"op\":\"shutdown\"}\n",
            "{\"op\":\"hello\",\"dim\":2}\n",
        );
        let mut out = Vec::new();
        serve(&src, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Reply> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| decode_reply(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], Reply::Hello { dim: 2 });
        assert!(matches!(&lines[1], Reply::Score { values } if values.iter().all(|x| *x == 0.0)));
        assert!(matches!(lines[2], Reply::Error { .. }));
        assert!(matches!(lines[3], Reply::Error { .. }));
    }
}

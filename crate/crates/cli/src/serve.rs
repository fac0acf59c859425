//! Line-delimited JSON serving over standard streams or TCP.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use anyhow::Result;

use polyret::retrieval::SearchEngine;

/// Answers one request per input line until end of input.
pub fn serve_lines<R: BufRead, W: Write>(engine: &SearchEngine<f64>, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", engine.handle_line(&line))?;
        output.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection, all sharing the
/// same read-only engine.
pub fn serve_tcp(engine: SearchEngine<f64>, addr: &str) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    let engine = Arc::new(engine);
    for stream in listener.incoming() {
        let stream = stream?;
        let engine = Arc::clone(&engine);
        thread::spawn(move || {
            let reader = BufReader::new(match stream.try_clone() {
                Ok(s) => s,
                Err(_) => return,
            });
            let _ = serve_lines(&engine, reader, stream);
        });
    }
    Ok(())
}

//! Starts the session server on a free port and drives it as a client:
//! acquire frames, slow down, acquire more, end.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use freehand::hitl::protocol::{decode_server, encode, ClientMessage, OperatorAction, ServerMessage};
use freehand::model::pipeline::Estimator;
use freehand::model::{ModelConfig, PoseModel};
use freehand::sampling::{ContrastiveConfig, ContrastiveEncoder, GroupingConfig};
use freehand::service::{ServeConfig, Server};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = ServeConfig::default();
    config.sweep.width = 32;
    config.sweep.height = 32;
    let est = Arc::new(Estimator {
        model: PoseModel::new(
            ModelConfig {
                frame_size: 32,
                ..ModelConfig::default()
            },
            1,
        )?,
        encoder: ContrastiveEncoder::new(ContrastiveConfig::default()),
        grouping: GroupingConfig::default(),
    });
    let server = Server::bind("127.0.0.1:0", est, config)?.spawn()?;
    println!("listening on {}", server.addr);

    let stream = TcpStream::connect(server.addr)?;
    let mut writer = stream.try_clone()?;
    for msg in [
        ClientMessage::Hello {
            session: "demo".into(),
            seed: Some(2),
        },
        ClientMessage::Advance { count: 3 },
        ClientMessage::OperatorAction(OperatorAction::SlowDown { factor: 0.5 }),
        ClientMessage::Advance { count: 2 },
        ClientMessage::End,
    ] {
        writeln!(writer, "{}", encode(msg))?;
    }
    for line in BufReader::new(stream).lines() {
        match decode_server(&line?)? {
            ServerMessage::UncertaintyReport { index, sigma2, gate, .. } => {
                println!("frame {index}: sigma2 {sigma2:.3e} {gate:?}")
            }
            ServerMessage::Prompt { index, message, .. } => println!("frame {index}: prompt \"{message}\""),
            ServerMessage::SessionSummary {
                frames_scored,
                frames_accepted,
                ..
            } => println!("summary: {frames_scored} scored, {frames_accepted} accepted"),
            ServerMessage::Error { message } => println!("error: {message}"),
            _ => {}
        }
    }
    server.shutdown();
    Ok(())
}

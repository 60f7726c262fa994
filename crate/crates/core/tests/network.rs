mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use gridvec_core::client::{train_step, ShardSet};
use gridvec_core::corpus::Minibatch;
use gridvec_core::shard::{AdjustRequest, DotprodRequest, ServerConfig, ServerHandle, ShardServer};
use gridvec_core::transport::{
    BandwidthMeter, Frame, OpCode, Request, Response, ShardLink, TcpLink,
};
use gridvec_core::{train, Matrix, Shard, TrainConfig, Vocabulary};

use common::{local_set, local_shards, synthetic_corpus};

const TIMEOUT: Duration = Duration::from_secs(20);

fn serve(shards: &[Arc<Shard>]) -> (Vec<ServerHandle>, Vec<String>) {
    let handles: Vec<ServerHandle> = shards
        .iter()
        .map(|s| {
            ShardServer::bind(
                Arc::clone(s),
                &ServerConfig {
                    workers: 2,
                    ..Default::default()
                },
            )
            .unwrap()
        })
        .collect();
    let endpoints = handles.iter().map(|h| h.local_addr().to_string()).collect();
    (handles, endpoints)
}

fn connect(endpoints: &[String]) -> ShardSet {
    ShardSet::connect(endpoints, TIMEOUT, Arc::new(BandwidthMeter::new())).unwrap()
}

fn small_vocab(n: usize) -> Vocabulary {
    Vocabulary::from_counts((0..n).map(|i| (format!("w{i:02}"), 100 - i as u64))).unwrap()
}

#[test]
fn tcp_training_is_bitwise_identical_to_local() {
    let (vocab, corpus) = synthetic_corpus(8_000, 21);
    let config = TrainConfig {
        dim: 24,
        shards: 3,
        epochs: 2,
        batch_size: 20,
        seed: 5,
        ..Default::default()
    };
    let local = local_set(
        &vocab,
        config.dim,
        config.shards,
        config.seed,
        BandwidthMeter::new(),
    );
    let local_stats = train(&corpus, &vocab, &config, &local).unwrap();

    let shards = local_shards(&vocab, config.dim, config.shards, config.seed);
    let (handles, endpoints) = serve(&shards);
    let remote = connect(&endpoints);
    let remote_stats = train(&corpus, &vocab, &config, &remote).unwrap();

    assert_eq!(local.export().unwrap(), remote.export().unwrap());
    assert_eq!(local_stats.steps, remote_stats.steps);
    // Same frames either way, so identical byte counts.
    assert_eq!(local_stats.bytes_sent, remote_stats.bytes_sent);
    assert_eq!(local_stats.bytes_received, remote_stats.bytes_received);
    drop(remote);
    handles.into_iter().for_each(ServerHandle::shutdown);
}

fn disjoint_batches(words: std::ops::Range<u32>, count: u64) -> Vec<Minibatch> {
    let span = words.end - words.start;
    (0..count)
        .map(|b| Minibatch {
            inputs: (0..4)
                .map(|i| words.start + (b as u32 * 3 + i) % span)
                .collect(),
            outputs: (0..4)
                .map(|i| {
                    vec![
                        words.start + (b as u32 * 5 + i + 1) % span,
                        words.start + (b as u32 + i * 7) % span,
                    ]
                })
                .collect(),
            batch_id: b,
        })
        .collect()
}

#[test]
fn concurrent_disjoint_clients_commute() {
    let vocab = small_vocab(40);
    let a = disjoint_batches(0..20, 60);
    let b = disjoint_batches(20..40, 60);
    // Without negatives the two clients touch disjoint rows.
    let run = |batches: &[Minibatch], set: &ShardSet| {
        for batch in batches {
            train_step(set, batch, 0, 0.05, batch.batch_id).unwrap();
        }
    };

    let shards = local_shards(&vocab, 12, 2, 3);
    let (handles, endpoints) = serve(&shards);
    std::thread::scope(|s| {
        for batches in [&a, &b] {
            let endpoints = &endpoints;
            s.spawn(move || run(batches, &connect(endpoints)));
        }
    });
    let concurrent = connect(&endpoints).export().unwrap();
    handles.into_iter().for_each(ServerHandle::shutdown);

    for order in [[&a, &b], [&b, &a]] {
        let seq = local_set(&vocab, 12, 2, 3, BandwidthMeter::new());
        for batches in order {
            run(batches, &seq);
        }
        assert_eq!(seq.export().unwrap(), concurrent);
    }
}

#[test]
fn shutdown_request_stops_an_idle_server() {
    let shards = local_shards(&small_vocab(5), 4, 1, 0);
    let (mut handles, endpoints) = serve(&shards);
    let link = TcpLink::connect(
        endpoints[0].as_str(),
        0,
        Arc::new(BandwidthMeter::new()),
        TIMEOUT,
    )
    .unwrap();
    assert!(matches!(
        link.call(&Request::Shutdown).unwrap().response,
        Response::Shutdown
    ));
    let handle = handles.pop().unwrap();
    // wait() only returns once every server thread has exited.
    handle.wait();
    assert!(TcpStream::connect(&endpoints[0]).is_err() || link.call(&Request::Hello).is_err());
}

fn read_frame(stream: &mut TcpStream) -> Option<Frame> {
    Frame::read_from(stream).ok().flatten()
}

#[test]
fn malformed_frames_only_affect_their_connection() {
    let shards = local_shards(&small_vocab(6), 4, 1, 0);
    let (handles, endpoints) = serve(&shards);
    let healthy = TcpLink::connect(
        endpoints[0].as_str(),
        0,
        Arc::new(BandwidthMeter::new()),
        TIMEOUT,
    )
    .unwrap();

    // A response opcode sent as a request: error reply, connection stays up.
    let mut raw = TcpStream::connect(&endpoints[0]).unwrap();
    raw.set_read_timeout(Some(TIMEOUT)).unwrap();
    Frame::new(OpCode::Response, 7, Vec::new())
        .write_to(&mut raw)
        .unwrap();
    let reply = read_frame(&mut raw).unwrap();
    assert_eq!((reply.op, reply.call_id), (OpCode::Error, 7));
    Request::Hello.to_frame(8).write_to(&mut raw).unwrap();
    let reply = read_frame(&mut raw).unwrap();
    assert_eq!((reply.op, reply.call_id), (OpCode::Response, 8));

    // A dotprod with a truncated body: error reply for that call.
    let mut body = Request::Dotprod(DotprodRequest {
        inputs: vec![0],
        outputs: vec![vec![1]],
        seed: 1,
        negatives: 1,
    })
    .to_frame(9);
    body.body.truncate(5);
    body.write_to(&mut raw).unwrap();
    let reply = read_frame(&mut raw).unwrap();
    assert_eq!((reply.op, reply.call_id), (OpCode::Error, 9));

    // Garbage header: one error frame, then the server drops the connection.
    let mut bad = TcpStream::connect(&endpoints[0]).unwrap();
    bad.set_read_timeout(Some(TIMEOUT)).unwrap();
    bad.write_all(&[0xFF; 16]).unwrap();
    let reply = read_frame(&mut bad).unwrap();
    assert_eq!(reply.op, OpCode::Error);
    let mut rest = Vec::new();
    assert_eq!(bad.read_to_end(&mut rest).unwrap_or(0), 0);

    // Other connections never noticed.
    assert!(matches!(
        healthy.call(&Request::Hello).unwrap().response,
        Response::Hello(_)
    ));
    drop(healthy);
    handles.into_iter().for_each(ServerHandle::shutdown);
}

fn restore(from: &Shard, vocab: &Vocabulary, dim: usize, shards: usize, id: usize) -> Arc<Shard> {
    let fresh = local_shards(vocab, dim, shards, 999).swap_remove(id);
    for m in [Matrix::Input, Matrix::Output] {
        for w in 0..vocab.len() as u32 {
            fresh.store().set_row(m, w, &from.store().row_vec(m, w));
        }
    }
    fresh
}

#[test]
fn adjust_succeeds_after_shard_restart_between_calls() {
    let vocab = small_vocab(30);
    let (dim, num_shards) = (8, 2);
    let batch = Minibatch {
        inputs: vec![1, 2, 3],
        outputs: vec![vec![4, 5], vec![6], vec![7, 8, 9]],
        batch_id: 0,
    };
    let seed = 77;

    // Uninterrupted reference.
    let reference = local_set(&vocab, dim, num_shards, 1, BandwidthMeter::new());
    train_step(&reference, &batch, 3, 0.1, seed).unwrap();
    let expected = reference.export().unwrap();

    let shards = local_shards(&vocab, dim, num_shards, 1);
    let (mut handles, mut endpoints) = serve(&shards);
    let set = connect(&endpoints);
    let mut partials = Vec::new();
    for link in set.links() {
        match link
            .call(&Request::Dotprod(DotprodRequest::new(&batch, seed, 3)))
            .unwrap()
            .response
        {
            Response::Dotprod(r) => partials.push(r),
            other => panic!("unexpected {other:?}"),
        }
    }
    let f = gridvec_core::client::aggregate_partials(&partials).unwrap();
    let g = gridvec_core::client::coefficients(&f, 0.1);
    drop(set);

    // Kill shard 1 and bring up a new process image holding the same rows.
    handles.pop().unwrap().shutdown();
    let revived = restore(&shards[1], &vocab, dim, num_shards, 1);
    let (new_handle, new_endpoint) = serve(std::slice::from_ref(&revived));
    handles.extend(new_handle);
    endpoints[1] = new_endpoint[0].clone();

    let set = connect(&endpoints);
    let adjust = Request::Adjust(AdjustRequest {
        inputs: batch.inputs.clone(),
        outputs: batch.outputs.clone(),
        g_plus: g.g_plus,
        g_minus: g.g_minus,
        seed,
        negatives: 3,
    });
    for link in set.links() {
        assert!(matches!(
            link.call(&adjust).unwrap().response,
            Response::Adjust
        ));
    }
    assert_eq!(set.export().unwrap(), expected);
    drop(set);
    handles.into_iter().for_each(ServerHandle::shutdown);
}

#[test]
fn unreachable_shard_is_reported() {
    let err = ShardSet::connect(
        &["127.0.0.1:1".to_string()],
        TIMEOUT,
        Arc::new(BandwidthMeter::new()),
    );
    assert!(matches!(err, Err(gridvec_core::Error::Unavailable { .. })));
}

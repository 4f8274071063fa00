//! FBCC v1 checkpoints: every network, the head list, prototypes and the
//! seed from which all per-task generators are derived. Little-endian.

use std::fs;
use std::path::Path;

use super::state::{ModelState, PoolEntry, Prototype, PrototypeSet, StudentPool};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Activation, ClusterProjector, Dense, Mlp};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"FBCC";
const VERSION: u32 = 1;

fn write_dense(w: &mut ByteWriter, d: &Dense) -> Result<()> {
    w.usize32(d.output_dim())?;
    w.usize32(d.input_dim())?;
    w.u8(match d.activation {
        Activation::Relu => 0,
        Activation::None => 1,
    });
    w.f64s(d.weight.values());
    w.f64s(d.bias.values());
    Ok(())
}

fn read_dense(r: &mut ByteReader) -> Result<Dense> {
    let out = r.u32()? as usize;
    let inp = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::None,
        other => return Err(Error::Format(format!("unknown activation tag {other}"))),
    };
    let len = out
        .checked_mul(inp)
        .ok_or_else(|| Error::Format("layer size overflows".into()))?;
    let weight = Matrix::new(out, inp, r.f64s(len)?)?;
    let bias = r.f64s(out)?;
    Dense::from_values(weight, bias, activation)
}

fn write_mlp(w: &mut ByteWriter, m: &Mlp) -> Result<()> {
    w.u8(u8::from(m.is_frozen()));
    w.usize32(m.layers().len())?;
    for layer in m.layers() {
        write_dense(w, layer)?;
    }
    Ok(())
}

fn read_mlp(r: &mut ByteReader) -> Result<Mlp> {
    let frozen = read_flag(r)?;
    let count = r.u32()? as usize;
    let layers = (0..count).map(|_| read_dense(r)).collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers, frozen)
}

fn read_flag(r: &mut ByteReader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format(format!("bad flag byte {other}"))),
    }
}

fn write_entry(w: &mut ByteWriter, e: &PoolEntry) -> Result<()> {
    w.usize32(e.task_id)?;
    write_mlp(w, &e.student)?;
    write_mlp(w, &e.projector)
}

fn read_entry(r: &mut ByteReader) -> Result<PoolEntry> {
    Ok(PoolEntry {
        task_id: r.u32()? as usize,
        student: read_mlp(r)?,
        projector: read_mlp(r)?,
    })
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(state.seed);
    w.usize32(state.task)?;
    w.usize32(state.pool.capacity())?;
    write_mlp(&mut w, &state.teacher)?;
    write_mlp(&mut w, &state.projector)?;

    write_dense(&mut w, &state.cluster.shared_first().layers()[0])?;
    w.usize32(state.cluster.num_heads())?;
    for head in state.cluster.heads() {
        write_dense(&mut w, head)?;
    }

    w.usize32(state.pool.frozen().len())?;
    for e in state.pool.frozen() {
        write_entry(&mut w, e)?;
    }
    match (state.pool.current_task(), state.pool.current()) {
        (Some(id), Some(student)) => {
            w.u8(1);
            w.usize32(id)?;
            write_mlp(&mut w, student)?;
        }
        _ => w.u8(0),
    }

    w.usize32(state.prototypes.len())?;
    for p in state.prototypes.items() {
        w.usize32(p.task_id)?;
        w.usize32(p.cluster)?;
        w.usize32(p.vector.len())?;
        w.f64s(&p.vector);
    }

    match &state.previous_teacher {
        Some(e) => {
            w.u8(1);
            write_entry(&mut w, e)?;
        }
        None => w.u8(0),
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64()?;
    let task = r.u32()? as usize;
    let capacity = r.u32()? as usize;
    let teacher = read_mlp(&mut r)?;
    let projector = read_mlp(&mut r)?;

    let shared = read_dense(&mut r)?;
    let heads = (0..r.u32()?).map(|_| read_dense(&mut r)).collect::<Result<Vec<_>>>()?;
    let cluster = ClusterProjector::from_parts(shared, heads)?;

    let frozen = (0..r.u32()?).map(|_| read_entry(&mut r)).collect::<Result<Vec<_>>>()?;
    let current = if read_flag(&mut r)? {
        Some((r.u32()? as usize, read_mlp(&mut r)?))
    } else {
        None
    };
    let pool = StudentPool::from_parts(capacity, frozen, current)?;

    let mut prototypes = PrototypeSet::default();
    for _ in 0..r.u32()? {
        let task_id = r.u32()? as usize;
        let cluster = r.u32()? as usize;
        let dim = r.u32()? as usize;
        prototypes.push(Prototype {
            task_id,
            cluster,
            vector: r.f64s(dim)?,
        });
    }
    let previous_teacher = if read_flag(&mut r)? {
        Some(read_entry(&mut r)?)
    } else {
        None
    };
    r.finish()?;
    Ok(ModelState {
        seed,
        task,
        teacher,
        projector,
        cluster,
        pool,
        prototypes,
        previous_teacher,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, TrainConfig};
    use crate::model::ModelSizes;

    fn engine_after_two_tasks(single: bool) -> Engine {
        let mut cfg = TrainConfig {
            students: Some(2),
            sizes: ModelSizes {
                input_dim: 3,
                teacher_hidden: vec![8],
                student_hidden: vec![2],
                latent_dim: 4,
                projector_hidden: 4,
                proj_dim: 3,
                predictor_hidden: 3,
                cluster_hidden: 4,
            },
            ..TrainConfig::default()
        };
        cfg.ablation.single_frozen_teacher = single;
        let mut e = Engine::new(cfg, 2).unwrap();
        let data = crate::data::TaskData {
            task_id: 1,
            num_clusters: 2,
            samples: Matrix::new(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap(),
        };
        e.begin_task(1, 2).unwrap();
        e.train_batch(&data.samples).unwrap();
        e.finish_task(&data).unwrap();
        e.begin_task(2, 3).unwrap();
        e
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for single in [false, true] {
            let e = engine_after_two_tasks(single);
            let bytes = encode_checkpoint(e.state()).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
            assert_eq!(back.cluster.head_sizes(), vec![2, 3]);
            assert_eq!(back.pool.task_ids(), vec![1, 2]);
            assert_eq!(back.prototypes, e.state().prototypes);
            assert_eq!(back.teacher.flat_values(), e.state().teacher.flat_values());
            assert_eq!(back.previous_teacher.is_some(), single);
        }
    }

    #[test]
    fn damaged_checkpoints_fail() {
        let bytes = encode_checkpoint(engine_after_two_tasks(false).state()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Format(_))));
    }
}

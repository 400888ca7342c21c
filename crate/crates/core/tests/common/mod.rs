#![allow(dead_code)]

use egpu::isa::MachineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Kernel {
    pub name: &'static str,
    pub source: &'static str,
    pub predicates: bool,
    pub init: fn(&mut ChaCha8Rng) -> Vec<u32>,
    /// Compare final shared memory against a host computation over `input`.
    pub check: fn(&[u32], &[u32]) -> Result<(), String>,
}

impl Kernel {
    pub fn config(&self) -> MachineConfig {
        MachineConfig {
            predicates_enabled: self.predicates,
            ..MachineConfig::default()
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen()).collect()
}

fn expect(what: &str, got: u32, want: u32) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:#010x}, want {want:#010x}"))
    }
}

fn vector_add_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut m = vec![0; 576];
    for i in 0..64 {
        m[i] = rng.gen();
        m[256 + i] = rng.gen();
    }
    m
}

fn vector_add_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    for i in 0..64 {
        expect(&format!("c[{i}]"), shared[512 + i], input[i].wrapping_add(input[256 + i]))?;
    }
    Ok(())
}

fn dot_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    words(rng, 128)
}

fn dot_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    let mut acc = 0u32;
    for i in 0..64 {
        let p = (input[i] as i32 as i64) * (input[64 + i] as i32 as i64);
        acc = acc.wrapping_add((p >> 32) as u32);
    }
    expect("dot", shared[128], acc)
}

fn reduce_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    words(rng, 256)
}

fn reduce_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    let sum = input.iter().fold(0u32, |a, &x| a.wrapping_add(x));
    expect("sum", shared[0], sum)
}

fn fir_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut m = vec![0; 136];
    for x in &mut m[..71] {
        *x = rng.gen_range(-(1 << 20)..(1 << 20)) as u32;
    }
    for h in &mut m[128..136] {
        *h = rng.gen_range(-1024..1024) as u32;
    }
    m
}

fn fir_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    for i in 0..64 {
        let acc = (0..8).fold(0i32, |a, k| a.wrapping_add((input[i + k] as i32).wrapping_mul(input[128 + k] as i32)));
        expect(&format!("y[{i}]"), shared[256 + i], (acc >> 8) as u32)?;
    }
    Ok(())
}

fn clamp_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..64)
        .map(|i| if i % 4 == 0 { rng.gen() } else { rng.gen_range(-3000i32..3000) as u32 })
        .collect()
}

fn clamp_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    for i in 0..64 {
        let want = (input[i] as i32).clamp(-1000, 1000) as u32;
        expect(&format!("y[{i}]"), shared[64 + i], want)?;
    }
    Ok(())
}

fn mix_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    words(rng, 48)
}

fn mix(tid: u32, x: u32) -> u32 {
    let ntid = 48u32;
    let mut r1 = (x << 3) ^ ((x as i32 >> 3) as u32);
    r1 &= r1 | 0xFF;
    r1 = r1.wrapping_add((tid == 0) as u32);
    let r9 = (r1.wrapping_sub(ntid) as i32).wrapping_abs() as u32;
    r1 = r1.min(r9);
    r1 = (r1 as i32).max(tid as i32) as u32;
    !r1.wrapping_mul(ntid)
}

fn mix_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    for t in 0..48 {
        expect(&format!("out[{t}]"), shared[128 + t as usize], mix(t, input[t as usize]))?;
    }
    Ok(())
}

fn shadow_init(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut m = words(rng, 104);
    for w in &mut m[100..] {
        if *w == 0xBAD {
            *w = 0;
        }
    }
    m
}

fn shadow_check(input: &[u32], shared: &[u32]) -> Result<(), String> {
    for a in 100..104 {
        expect(&format!("poison word {a}"), shared[a], input[a])?;
    }
    for t in 0..32u32 {
        expect(&format!("out[{t}]"), shared[200 + t as usize], t)?;
    }
    Ok(())
}

pub const KERNELS: &[Kernel] = &[
    Kernel {
        name: "vector_add",
        source: include_str!("../../kernels/vector_add.s"),
        predicates: false,
        init: vector_add_init,
        check: vector_add_check,
    },
    Kernel {
        name: "dot_q31",
        source: include_str!("../../kernels/dot_q31.s"),
        predicates: false,
        init: dot_init,
        check: dot_check,
    },
    Kernel {
        name: "reduce_sum",
        source: include_str!("../../kernels/reduce_sum.s"),
        predicates: false,
        init: reduce_init,
        check: reduce_check,
    },
    Kernel {
        name: "fir_sar",
        source: include_str!("../../kernels/fir_sar.s"),
        predicates: false,
        init: fir_init,
        check: fir_check,
    },
    Kernel {
        name: "clamp_pred",
        source: include_str!("../../kernels/clamp_pred.s"),
        predicates: true,
        init: clamp_init,
        check: clamp_check,
    },
    Kernel {
        name: "mix_call",
        source: include_str!("../../kernels/mix_call.s"),
        predicates: false,
        init: mix_init,
        check: mix_check,
    },
    Kernel {
        name: "branch_shadow",
        source: include_str!("../../kernels/branch_shadow.s"),
        predicates: false,
        init: shadow_init,
        check: shadow_check,
    },
];

pub fn kernel(name: &str) -> &'static Kernel {
    KERNELS.iter().find(|k| k.name == name).expect("kernel in corpus")
}

pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] AC{id} {name}: {detail}");
}

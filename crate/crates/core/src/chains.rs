//! Step functions, streaming simulation and the coupled sandwich chains.

use rand::Rng;
use thiserror::Error;

use crate::model::{sample_innovation, ChainKind, Innovation, ModelSpec};
use crate::real::{Real, Scaled, StateRange};
use crate::stats::CompensatedSum;

/// `a x + b`.
#[inline]
pub fn step_affine<F: Real>(x: F, a: F, b: F) -> F {
    a * x + b
}

/// `b + a max(c, x)`.
#[inline]
pub fn step_letac<F: Real>(x: F, a: F, b: F, c: F) -> F {
    b + a * x.max(c)
}

/// `max(a x, d)`.
#[inline]
pub fn step_extremal<F: Real>(x: F, a: F, d: F) -> F {
    (a * x).max(d)
}

/// One step of the chain of the given kind on an extended-range state.
#[inline]
pub fn step_scaled<F: Real>(kind: ChainKind, x: Scaled<F>, inn: &Innovation<F>, range: StateRange) -> Scaled<F> {
    match kind {
        ChainKind::Affine => x.mul_add(inn.a, inn.b, range),
        ChainKind::Letac => x.max_scalar(inn.c).mul_add(inn.a, inn.b, range),
        ChainKind::Extremal => x.scale(inn.a, range).max_scalar(inn.d),
    }
}

/// Current state of a running chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainState<F> {
    pub x: Scaled<F>,
    s: CompensatedSum<F>,
    pub n: u64,
}

impl<F: Real> ChainState<F> {
    pub fn new(x0: F) -> Self {
        Self { x: Scaled::new(x0), s: CompensatedSum::new(), n: 0 }
    }

    /// `S_n = log(A_1 ... A_n)`.
    #[inline]
    pub fn s(&self) -> F {
        self.s.value()
    }
}

/// What an observer sees for step `n`: the move from `prev = X_{n-1}` to `x = X_n`.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a, F> {
    pub n: u64,
    pub prev: Scaled<F>,
    pub x: Scaled<F>,
    /// `S_n`.
    pub s: F,
    pub innovation: &'a Innovation<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Receives every transition of a simulation pass.
pub trait Observer<F: Real> {
    fn observe(&mut self, t: &Transition<'_, F>) -> Flow;
}

impl<F: Real> Observer<F> for () {
    #[inline]
    fn observe(&mut self, _: &Transition<'_, F>) -> Flow {
        Flow::Continue
    }
}

impl<F: Real, O: Observer<F> + ?Sized> Observer<F> for &mut O {
    #[inline]
    fn observe(&mut self, t: &Transition<'_, F>) -> Flow {
        (**self).observe(t)
    }
}

macro_rules! tuple_observer {
    ($($name:ident . $idx:tt),+) => {
        impl<F: Real, $($name: Observer<F>),+> Observer<F> for ($($name,)+) {
            #[inline]
            fn observe(&mut self, t: &Transition<'_, F>) -> Flow {
                let mut flow = Flow::Continue;
                $(
                    if self.$idx.observe(t) == Flow::Stop {
                        flow = Flow::Stop;
                    }
                )+
                flow
            }
        }
    };
}

tuple_observer!(A.0);
tuple_observer!(A.0, B.1);
tuple_observer!(A.0, B.1, C.2);
tuple_observer!(A.0, B.1, C.2, D.3);

/// Adapter turning a closure into an observer.
pub struct FnObserver<G>(pub G);

impl<F: Real, G: FnMut(&Transition<'_, F>) -> Flow> Observer<F> for FnObserver<G> {
    #[inline]
    fn observe(&mut self, t: &Transition<'_, F>) -> Flow {
        (self.0)(t)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError<F: Real> {
    /// The state left the representable range; `state` is the last finite state.
    #[error("state overflow at step {}: the chain left the representable range", state.n + 1)]
    Overflow { state: ChainState<F> },
}

/// A chain bound to its model and state representation.
#[derive(Debug, Clone)]
pub struct Chain<'m, F> {
    model: &'m ModelSpec<F>,
    range: StateRange,
    state: ChainState<F>,
}

impl<'m, F: Real> Chain<'m, F> {
    pub fn new(model: &'m ModelSpec<F>, x0: F, range: StateRange) -> Self {
        Self { model, range, state: ChainState::new(x0) }
    }

    /// A chain started at an extended-range state, with `S_0 = 0`.
    pub fn from_state(model: &'m ModelSpec<F>, x0: Scaled<F>, range: StateRange) -> Self {
        Self { model, range, state: ChainState { x: x0, s: CompensatedSum::new(), n: 0 } }
    }

    pub fn state(&self) -> &ChainState<F> {
        &self.state
    }

    /// Draws an innovation, applies it and reports the transition.
    #[inline]
    pub fn advance<R: Rng + ?Sized, O: Observer<F>>(&mut self, rng: &mut R, obs: &mut O) -> Result<Flow, SimError<F>> {
        let inn = sample_innovation(self.model, rng);
        let prev = self.state.x;
        let x = step_scaled(self.model.chain_kind, prev, &inn, self.range);
        if !x.is_finite() {
            return Err(SimError::Overflow { state: self.state });
        }
        self.state.x = x;
        self.state.s.add(inn.log_a);
        self.state.n += 1;
        let t = Transition { n: self.state.n, prev, x, s: self.state.s(), innovation: &inn };
        Ok(obs.observe(&t))
    }
}

/// Runs `n_steps` transitions from `x0`, feeding each to `obs`. Stops early
/// if the observer asks to.
pub fn simulate<F: Real, R: Rng + ?Sized, O: Observer<F>>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: u64,
    rng: &mut R,
    range: StateRange,
    mut obs: O,
) -> Result<ChainState<F>, SimError<F>> {
    let mut chain = Chain::new(model, x0, range);
    for _ in 0..n_steps {
        if chain.advance(rng, &mut obs)? == Flow::Stop {
            break;
        }
    }
    Ok(chain.state)
}

/// Trajectories of the lower affine chain, the Letac chain and the upper
/// affine chain, all driven by one innovation stream. Index 0 is `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichPaths<F> {
    pub lower: Vec<Scaled<F>>,
    pub letac: Vec<Scaled<F>>,
    pub upper: Vec<Scaled<F>>,
}

/// Streaming form of the sandwich: lower `a l + b`, Letac `b + a max(c, x)`,
/// upper `a u + (b + a c)`.
#[derive(Debug, Clone, Copy)]
pub struct Sandwich<F> {
    pub lower: Scaled<F>,
    pub letac: Scaled<F>,
    pub upper: Scaled<F>,
}

impl<F: Real> Sandwich<F> {
    pub fn new(x0: F) -> Self {
        let x = Scaled::new(x0);
        Self { lower: x, letac: x, upper: x }
    }

    #[inline]
    pub fn step(&mut self, inn: &Innovation<F>) {
        let r = StateRange::Extended;
        self.lower = self.lower.mul_add(inn.a, inn.b, r);
        self.letac = step_scaled(ChainKind::Letac, self.letac, inn, r);
        self.upper = self.upper.mul_add(inn.a, inn.b + inn.a * inn.c, r);
    }

    pub fn ordered(&self) -> bool {
        self.lower <= self.letac && self.letac <= self.upper
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandwichError {
    #[error("the sandwich bound is defined for the Letac chain only")]
    NotLetac,
}

pub fn simulate_coupled_sandwich<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: usize,
    rng: &mut R,
) -> Result<SandwichPaths<F>, SandwichError> {
    if model.chain_kind != ChainKind::Letac {
        return Err(SandwichError::NotLetac);
    }
    let mut sw = Sandwich::new(x0);
    let mut out = SandwichPaths {
        lower: Vec::with_capacity(n_steps + 1),
        letac: Vec::with_capacity(n_steps + 1),
        upper: Vec::with_capacity(n_steps + 1),
    };
    let push = |out: &mut SandwichPaths<F>, sw: &Sandwich<F>| {
        out.lower.push(sw.lower);
        out.letac.push(sw.letac);
        out.upper.push(sw.upper);
    };
    push(&mut out, &sw);
    for _ in 0..n_steps {
        let inn = sample_innovation(model, rng);
        sw.step(&inn);
        push(&mut out, &sw);
    }
    Ok(out)
}

/// Violation counts of the sandwich ordering and of the `x >= delta` support
/// bound (checked from step 1 on).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SandwichCheck {
    pub steps: u64,
    pub order_violations: u64,
    pub support_violations: u64,
}

/// Streams the sandwich for `n_steps` and counts violations without storing paths.
pub fn check_sandwich<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: u64,
    rng: &mut R,
) -> Result<SandwichCheck, SandwichError> {
    if model.chain_kind != ChainKind::Letac {
        return Err(SandwichError::NotLetac);
    }
    let delta = Scaled::new(model.delta);
    let mut sw = Sandwich::new(x0);
    let mut chk = SandwichCheck::default();
    for _ in 0..n_steps {
        let inn = sample_innovation(model, rng);
        sw.step(&inn);
        chk.steps += 1;
        chk.order_violations += u64::from(!sw.ordered());
        chk.support_violations += u64::from(sw.letac < delta);
    }
    Ok(chk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference::{m1, m2};
    use crate::model::{ALaw, BLaw, CLaw};
    use crate::rng::{Purpose, RandomStream};

    #[test]
    fn step_examples() {
        assert_eq!(step_affine(0.0, 2.0, 3.0), 3.0);
        assert_eq!(step_affine(1.0, 1.0, 1.0), 2.0);
        assert_eq!(step_affine(2.0, 1.5, 3.0), 6.0);
        assert_eq!(step_letac(1.0, 2.0, 0.5, 3.0), 6.5);
        assert_eq!(step_letac(5.0, 1.0, 0.0, 0.0), 5.0);
        assert_eq!(step_letac(-4.0, 2.0, 1.0, 0.0), 1.0);
        assert_eq!(step_extremal(2.0, 0.5, 3.0), 3.0);
        assert_eq!(step_extremal(10.0, 1.0, 1.0), 10.0);
        assert_eq!(step_extremal(0.0, 7.0, 2.0), 2.0);
    }

    #[test]
    fn scaled_steps_match_plain_steps() {
        let inn = Innovation { log_a: 0.0, a: 1.5, b: 3.0, c: 4.0, d: 2.5 };
        let r = StateRange::Extended;
        for &x in &[-3.0, 0.0, 2.0, 7.0] {
            assert_eq!(step_scaled(ChainKind::Affine, Scaled::new(x), &inn, r).value(), step_affine(x, 1.5, 3.0));
            assert_eq!(step_scaled(ChainKind::Letac, Scaled::new(x), &inn, r).value(), step_letac(x, 1.5, 3.0, 4.0));
            assert_eq!(step_scaled(ChainKind::Extremal, Scaled::new(x), &inn, r).value(), step_extremal(x, 1.5, 2.5));
        }
    }

    fn deterministic_letac() -> ModelSpec<f64> {
        let mut m = m2::<f64>();
        m.a_law = ALaw::LogNormal { m: 0.5f64.ln(), s2: 0.0 };
        m.b_law = Some(BLaw::Constant { c: 1.0 });
        m.c_law = Some(CLaw::Constant { c: 0.0 });
        m
    }

    #[test]
    fn deterministic_path() {
        let m = deterministic_letac();
        let mut rng = RandomStream::substream(0, Purpose::Test, 0);
        let mut path = vec![0.0];
        simulate(
            &m,
            0.0,
            3,
            &mut rng,
            StateRange::Extended,
            FnObserver(|t: &Transition<'_, f64>| {
                path.push(t.x.value());
                Flow::Continue
            }),
        )
        .unwrap();
        let expect = [0.0, 1.0, 1.5, 1.75];
        for (p, e) in path.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15, "{path:?}");
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut rng = RandomStream::substream(0, Purpose::Test, 0);
        let st = simulate(&m1::<f64>(), 0.25, 0, &mut rng, StateRange::Extended, ()).unwrap();
        assert_eq!(st.x.value(), 0.25);
        assert_eq!(st.s(), 0.0);
        assert_eq!(st.n, 0);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut rng = RandomStream::substream(42, Purpose::Simulate, 0);
            simulate(&m1::<f64>(), 0.0, 1_000_000, &mut rng, StateRange::Extended, ()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.x.mantissa().to_bits(), b.x.mantissa().to_bits());
        assert_eq!(a.x.chunks(), b.x.chunks());
        assert_eq!(a.s().to_bits(), b.s().to_bits());
    }

    #[test]
    fn observer_stop_ends_run() {
        let mut rng = RandomStream::substream(1, Purpose::Test, 0);
        let st = simulate(
            &m1::<f64>(),
            0.0,
            100,
            &mut rng,
            StateRange::Extended,
            FnObserver(|t: &Transition<'_, f64>| if t.n == 10 { Flow::Stop } else { Flow::Continue }),
        )
        .unwrap();
        assert_eq!(st.n, 10);
    }

    #[test]
    fn native_range_overflow_is_reported() {
        let mut m = m1::<f64>();
        m.a_law = ALaw::LogNormal { m: 0.0, s2: 400.0 };
        let mut rng = RandomStream::substream(5, Purpose::Test, 0);
        let err = simulate(&m, 1.0, 1_000_000, &mut rng, StateRange::Native, ()).unwrap_err();
        let SimError::Overflow { state } = err;
        assert!(state.x.is_finite());
        assert!(state.n < 1_000_000);
        let mut rng = RandomStream::substream(5, Purpose::Test, 0);
        assert!(simulate(&m, 1.0, 1_000_000, &mut rng, StateRange::Extended, ()).is_ok());
    }

    #[test]
    fn sandwich_one_step() {
        let inn = Innovation { log_a: 2f64.ln(), a: 2.0, b: 0.5, c: 3.0, d: 0.0 };
        let mut sw = Sandwich::new(1.0);
        sw.step(&inn);
        assert_eq!(sw.lower.value(), 2.5);
        assert_eq!(sw.upper.value(), 8.5);
        assert_eq!(sw.letac.value(), 6.5);
        assert!(sw.ordered());
    }

    #[test]
    fn sandwich_holds_pathwise() {
        let m = m2::<f64>();
        let mut rng = RandomStream::substream(9, Purpose::Test, 0);
        let p = simulate_coupled_sandwich(&m, 0.5, 100_000, &mut rng).unwrap();
        for i in 0..p.letac.len() {
            assert!(p.lower[i] <= p.letac[i] && p.letac[i] <= p.upper[i], "index {i}");
        }
    }

    #[test]
    fn sandwich_with_zero_c_is_tight_from_below() {
        let mut m = m2::<f64>();
        m.c_law = Some(CLaw::Constant { c: 0.0 });
        let mut rng = RandomStream::substream(10, Purpose::Test, 0);
        let p = simulate_coupled_sandwich(&m, 0.5, 10_000, &mut rng).unwrap();
        // lower starts at the same point and both stay >= 0, so they coincide
        for i in 0..p.letac.len() {
            assert!(p.lower[i] <= p.letac[i]);
            assert_eq!(p.lower[i], p.letac[i]);
        }
        assert_eq!(simulate_coupled_sandwich(&m1::<f64>(), 0.0, 1, &mut rng), Err(SandwichError::NotLetac));
    }
}

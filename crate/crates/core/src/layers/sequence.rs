use crate::error::{dim_err, Error, Result};
use crate::exec::{map_ordered, map_ordered_owned};
use crate::layers::gru::{gru_backward, gru_trace, GruParams, GruTrace};
use crate::layers::{backward_chain, forward_chain, Layer, Pass, Saved};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Gru<T = f32> {
    pub name: String,
    pub params: GruParams<T>,
    pub return_sequence: bool,
}

impl<T: Element> Gru<T> {
    pub(crate) fn forward(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Saved<T>>)> {
        let trace = gru_trace(x, &self.params)?;
        let y = if self.return_sequence {
            trace.sequence()
        } else {
            Tensor::vector(trace.final_state().to_vec())
        };
        Ok((y, keep.then_some(Saved::Gru(trace))))
    }
}

/// Two GRUs over opposite time directions; emits `[fwd_final ++ bwd_final]`.
#[derive(Debug, Clone)]
pub struct BiGru<T = f32> {
    pub name: String,
    pub fwd: GruParams<T>,
    pub bwd: GruParams<T>,
}

impl<T: Element> BiGru<T> {
    pub fn units(&self) -> usize {
        self.fwd.units()
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<Saved<T>>)> {
        let f = gru_trace(x, &self.fwd)?;
        let b = gru_trace(&x.reverse_axis0(), &self.bwd)?;
        let mut out = f.final_state().to_vec();
        out.extend_from_slice(b.final_state());
        Ok((Tensor::vector(out), keep.then_some(Saved::BiGru(f, b))))
    }

    pub(crate) fn backward(
        &self,
        f: &GruTrace<T>,
        b: &GruTrace<T>,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let u = self.units();
        if g.shape() != [2 * u] || grads.len() != 18 {
            return dim_err(format!(
                "bigru {}: gradient {:?} / {} slots, expected [{}] / 18",
                self.name,
                g.shape(),
                grads.len(),
                2 * u
            ));
        }
        let (gf, gb) = grads.split_at_mut(9);
        let dfwd = Tensor::vector(g.data()[..u].to_vec());
        let dbwd = Tensor::vector(g.data()[u..].to_vec());
        let dx_f = gru_backward(f, &self.fwd, &dfwd, gf, need_input)?;
        let dx_b = gru_backward(b, &self.bwd, &dbwd, gb, need_input)?;
        match (dx_f, dx_b) {
            (Some(mut dx), Some(dx_rev)) => {
                dx.add_assign(&dx_rev.reverse_axis0())?;
                Ok(Some(dx))
            }
            _ => Ok(None),
        }
    }
}

/// Applies the same sub-network to every frame of a `[T, ...]` input.
#[derive(Debug, Clone)]
pub struct TimeDistributed<T = f32> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
}

impl<T: Element> TimeDistributed<T> {
    pub(crate) fn forward(&self, x: &Tensor<T>, pass: Pass) -> Result<(Tensor<T>, Option<Saved<T>>)> {
        let frames = x.shape().first().copied().unwrap_or(0);
        if frames == 0 {
            return dim_err(format!("{}: input {:?} has no frames", self.name, x.shape()));
        }
        let idx: Vec<usize> = (0..frames).collect();
        let results = map_ordered(&idx, pass.exec, |_, &t| {
            forward_chain(&self.layers, &x.index_axis0(t), pass.derive(t as u64 + 1))
                .map_err(|e| frame_error(&self.name, t, e))
        });
        let mut outs = Vec::with_capacity(frames);
        let mut saves = Vec::with_capacity(if pass.train { frames } else { 0 });
        for r in results {
            let (y, s) = r?;
            outs.push(y);
            if pass.train {
                saves.push(s);
            }
        }
        let y = Tensor::stack(&outs).map_err(|e| Error::Dimension(format!("{}: {e}", self.name)))?;
        Ok((y, pass.train.then_some(Saved::Frames(saves))))
    }

    /// Each frame's parameter gradients go into a fresh buffer that is then
    /// added to `grads` in frame order, in both execution modes.
    pub(crate) fn backward(
        &self,
        frames: Vec<Vec<Saved<T>>>,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
        pass: Pass,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if g.shape().first() != Some(&frames.len()) {
            return dim_err(format!(
                "{}: gradient {:?} does not cover {} frames",
                self.name,
                g.shape(),
                frames.len()
            ));
        }
        let zero: Vec<Tensor<T>> = self.layers.iter().flat_map(Layer::zero_grads).collect();
        let frame_backward = |t: usize, saves: Vec<Saved<T>>| {
            let mut local = zero.clone();
            let dx = backward_chain(
                &self.layers,
                saves,
                &g.index_axis0(t),
                &mut local,
                pass.derive(t as u64 + 1),
                need_input,
                0,
            )
            .map_err(|e| frame_error(&self.name, t, e))?;
            Ok::<_, Error>((local, dx))
        };
        let mut dxs = Vec::with_capacity(if need_input { frames.len() } else { 0 });
        let mut fold = |r: Result<FrameGrads<T>>| -> Result<()> {
            let (local, dx) = r?;
            for (acc, l) in grads.iter_mut().zip(&local) {
                acc.add_assign(l)?;
            }
            dxs.extend(dx);
            Ok(())
        };
        if pass.exec.is_parallel() {
            for r in map_ordered_owned(frames, pass.exec, frame_backward) {
                fold(r)?;
            }
        } else {
            for (t, saves) in frames.into_iter().enumerate() {
                fold(frame_backward(t, saves))?;
            }
        }
        if !need_input {
            return Ok(None);
        }
        Ok(Some(Tensor::stack(&dxs)?))
    }
}

/// Parameter gradients of one frame, and its input gradient if wanted.
type FrameGrads<T> = (Vec<Tensor<T>>, Option<Tensor<T>>);

fn frame_error(layer: &str, frame: usize, e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("{layer}: frame {frame}: {m}")),
        other => other,
    }
}

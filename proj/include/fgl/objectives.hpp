#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fgl/flowmatch.hpp"
#include "fgl/graph.hpp"
#include "fgl/model.hpp"
#include "fgl/tensor.hpp"

namespace fgl {

// Linear decay of the alignment-loss weight: lambda_start at step 0 down to
// lambda_end at decay_steps, constant afterward.
struct LambdaSchedule {
  double lambda_start = 0.3;
  double lambda_end = 0.01;
  int decay_steps = 2000;
};

double lambda_at(const LambdaSchedule& schedule, int64_t step);

// Alignment loss between two representations v (n x d) and h (n x d_m) via
// their uncentered Gram matrices K = v v^T and L = h h^T:
//
//   loss = 1 - ||K^T L||_F^2 / (||K^T K||_F * ||L^T L||_F)
//
// Result lies in [0, 1]; 0 means the Gram matrices agree up to scale.
// Throws if n < 2, if the row counts differ, or if either input is all-zero
// (the denominator vanishes).
double cka_loss(const Tensor& v, const Tensor& h);

// Appends the same loss to a graph, returning the (1)-shaped loss node.
// The caller is responsible for guaranteeing the eager preconditions; an
// all-zero input makes the forward value NaN instead of throwing.
NodeId append_cka_loss(Graph& g, NodeId v, NodeId h);

// Combined melody-stage loss: cfm_loss plus lambda * alignment loss between
// the predicted velocity and the interpolated melody features, both restricted
// to the masked frames of each item and averaged over the batch. Items whose
// masked melody rows are entirely zero (condition dropout) contribute no
// alignment term. With lambda == 0 the result and gradients are bit-identical
// to cfm_loss on the same arguments. When cka_out is non-null it receives the
// mean alignment value over the items that carried the term (0 if none did).
double sft2_loss_fixed_lambda(const ModelParams& params, const std::vector<TrainItem>& batch,
                              double lambda, uint64_t seed,
                              std::map<std::string, Tensor>* grads = nullptr,
                              double* cka_out = nullptr);

double sft2_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                 const LambdaSchedule& schedule, int64_t step, uint64_t seed,
                 std::map<std::string, Tensor>* grads = nullptr, double* cka_out = nullptr);

}  // namespace fgl

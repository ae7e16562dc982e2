// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#ifndef SEQTR_SEQTR_HPP
#define SEQTR_SEQTR_HPP

#include "seqtr/attention.hpp"
#include "seqtr/autograd.hpp"
#include "seqtr/checkpoint.hpp"
#include "seqtr/commands.hpp"
#include "seqtr/config.hpp"
#include "seqtr/detector_stub.hpp"
#include "seqtr/errors.hpp"
#include "seqtr/evaluation.hpp"
#include "seqtr/gradcheck.hpp"
#include "seqtr/gradcheck_suite.hpp"
#include "seqtr/losses.hpp"
#include "seqtr/ops.hpp"
#include "seqtr/reid_transformer.hpp"
#include "seqtr/synth_data.hpp"
#include "seqtr/tensor.hpp"
#include "seqtr/training.hpp"

#endif  // SEQTR_SEQTR_HPP

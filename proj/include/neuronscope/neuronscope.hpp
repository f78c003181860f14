#pragma once

#include "neuronscope/error.hpp"
#include "neuronscope/unit_catalog.hpp"
#include "neuronscope/concept_corpus.hpp"
#include "neuronscope/activation_store.hpp"
#include "neuronscope/average_precision.hpp"
#include "neuronscope/expertise.hpp"
#include "neuronscope/overlap.hpp"
#include "neuronscope/tokenizer.hpp"
#include "neuronscope/toy_corpus.hpp"
#include "neuronscope/tlm/model.hpp"
#include "neuronscope/tlm/sampling.hpp"
#include "neuronscope/tlm/train.hpp"
#include "neuronscope/tlm/checkpoint.hpp"
#include "neuronscope/tlm/probe.hpp"
#include "neuronscope/conditioner.hpp"

#pragma once

// Codebook-based vision-language pretraining at desk scale: joint codebook
// learning with masked image modeling, masked language modeling, image-text
// matching, and language-conditioned pixel reconstruction, plus retrieval
// evaluation and figure tooling.

#include "cbvila/ablation.hpp"
#include "cbvila/checkpoint.hpp"
#include "cbvila/codebook.hpp"
#include "cbvila/common.hpp"
#include "cbvila/config.hpp"
#include "cbvila/dataset.hpp"
#include "cbvila/graph.hpp"
#include "cbvila/image.hpp"
#include "cbvila/losses.hpp"
#include "cbvila/masking.hpp"
#include "cbvila/model.hpp"
#include "cbvila/optimizer.hpp"
#include "cbvila/params.hpp"
#include "cbvila/patches.hpp"
#include "cbvila/retrieval.hpp"
#include "cbvila/rng.hpp"
#include "cbvila/schedule.hpp"
#include "cbvila/tokenizer.hpp"
#include "cbvila/trainer.hpp"
#include "cbvila/transformer.hpp"
#include "cbvila/viz.hpp"

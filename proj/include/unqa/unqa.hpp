#pragma once

#include "unqa/audio.hpp"
#include "unqa/autograd.hpp"
#include "unqa/config.hpp"
#include "unqa/core.hpp"
#include "unqa/evaluation.hpp"
#include "unqa/manifest.hpp"
#include "unqa/media.hpp"
#include "unqa/mel.hpp"
#include "unqa/metrics.hpp"
#include "unqa/model.hpp"
#include "unqa/motion.hpp"
#include "unqa/nn.hpp"
#include "unqa/objectives.hpp"
#include "unqa/preprocess.hpp"
#include "unqa/report.hpp"
#include "unqa/run.hpp"
#include "unqa/spatial.hpp"
#include "unqa/split.hpp"
#include "unqa/synthetic.hpp"
#include "unqa/training.hpp"

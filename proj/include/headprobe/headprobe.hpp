#pragma once

#include "headprobe/detector.hpp"
#include "headprobe/error.hpp"
#include "headprobe/head_eval.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/indicators.hpp"
#include "headprobe/manifest.hpp"
#include "headprobe/probe.hpp"
#include "headprobe/synth.hpp"
#include "headprobe/zoo.hpp"

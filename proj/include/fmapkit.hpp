#pragma once

#include "fmapkit/convert.hpp"
#include "fmapkit/error.hpp"
#include "fmapkit/eval.hpp"
#include "fmapkit/extractor.hpp"
#include "fmapkit/fmap.hpp"
#include "fmapkit/kpconv.hpp"
#include "fmapkit/mesh.hpp"
#include "fmapkit/pipeline.hpp"
#include "fmapkit/pointmap.hpp"
#include "fmapkit/shapes.hpp"
#include "fmapkit/spectral.hpp"
#include "fmapkit/train.hpp"

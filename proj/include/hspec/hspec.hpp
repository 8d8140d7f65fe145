#pragma once

#include "hspec/error.hpp"
#include "hspec/random.hpp"
#include "hspec/parallel.hpp"
#include "hspec/linalg.hpp"
#include "hspec/operator.hpp"
#include "hspec/density.hpp"
#include "hspec/lanczos.hpp"
#include "hspec/deflation.hpp"
#include "hspec/net.hpp"
#include "hspec/decomp.hpp"
#include "hspec/rmt.hpp"
#include "hspec/pipeline.hpp"
#include "hspec/io.hpp"

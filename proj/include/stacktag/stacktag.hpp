#pragma once

#include "stacktag/binio.hpp"
#include "stacktag/corpus.hpp"
#include "stacktag/crf.hpp"
#include "stacktag/embeddings.hpp"
#include "stacktag/ensemble.hpp"
#include "stacktag/error.hpp"
#include "stacktag/lingfeat.hpp"
#include "stacktag/lstm.hpp"
#include "stacktag/metrics.hpp"
#include "stacktag/rng.hpp"
#include "stacktag/tagger.hpp"
#include "stacktag/textclf.hpp"
#include "stacktag/utf8.hpp"

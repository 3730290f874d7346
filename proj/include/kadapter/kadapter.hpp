#pragma once

#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"
#include "kadapter/params.hpp"
#include "kadapter/checkpoint.hpp"
#include "kadapter/batch.hpp"
#include "kadapter/backbone.hpp"
#include "kadapter/adapter.hpp"
#include "kadapter/tasks.hpp"
#include "kadapter/corpus.hpp"
#include "kadapter/config.hpp"
#include "kadapter/trainer.hpp"
#include "kadapter/probe.hpp"

/* Native entropy coder boundary.
 *
 * A native range coder links against lmfc through these symbols. All
 * integers are host-endian; every function returns one of the LMFC_RC_*
 * codes below.
 *
 * Tables are passed flat. Table t covers symbols
 *   offsets[t] .. offsets[t] + lengths[t] - 1
 * and its cumulative frequencies are
 *   cdf[starts[t]] .. cdf[starts[t] + lengths[t]]
 * which start at 0, end at LMFC_RC_CDF_TOTAL and increase strictly.
 * Symbol i is coded with table indexes[i].
 */
#ifndef LMFC_CODER_H
#define LMFC_CODER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define LMFC_RC_CDF_PRECISION 16
#define LMFC_RC_CDF_TOTAL 65536u

#define LMFC_RC_OK 0
#define LMFC_RC_MALFORMED_TABLE 1
#define LMFC_RC_BAD_INDEX 2
#define LMFC_RC_SYMBOL_OUT_OF_RANGE 3
#define LMFC_RC_LENGTH_MISMATCH 4
#define LMFC_RC_CORRUPT 5
#define LMFC_RC_NOT_BUILT 6

typedef struct lmfc_rc_tables {
    size_t count;
    const int32_t *offsets;
    const uint32_t *starts;
    const uint32_t *lengths;
    const uint32_t *cdf;
    size_t cdf_len;
} lmfc_rc_tables;

/* Encodes n symbols. On success *out points to *out_len bytes owned by
 * the coder; release them with rc_free_buffer. */
int32_t rc_encode(const int32_t *symbols, const uint32_t *indexes, size_t n,
                  const lmfc_rc_tables *tables, uint8_t **out, size_t *out_len);

/* Decodes n symbols into symbols[0..n). */
int32_t rc_decode(const uint8_t *bytes, size_t len, const uint32_t *indexes, size_t n,
                  const lmfc_rc_tables *tables, int32_t *symbols);

void rc_free_buffer(uint8_t *buf, size_t len);

/* Incremental decoding: the table for each symbol may depend on the
 * symbols already decoded. bytes and tables must outlive the handle. */
typedef struct rc_stream_decoder rc_stream_decoder;

int32_t rc_stream_decode_new(const uint8_t *bytes, size_t len, const lmfc_rc_tables *tables,
                             rc_stream_decoder **out);

int32_t rc_stream_decode_next_symbol(rc_stream_decoder *dec, uint32_t table, int32_t *symbol);

void rc_stream_decode_free(rc_stream_decoder *dec);

#ifdef __cplusplus
}
#endif

#endif
